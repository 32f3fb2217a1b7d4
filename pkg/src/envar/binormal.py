"""Binormal curvature flow over weighted closed polygons in R^3.

A polygon with vertices ``x_0..x_{N-1}`` (closed) and per-segment weights
``theta`` represents the vector measure ``sum_k theta_k e_k ds / |e_k|`` with
segment vectors ``e_k = x_{k+1} - x_k``.  The energy is the total variation
``sum theta_k |e_k|``; the operator pairs the measure with
``grad(curl phi) : tau x tau``.

Test fields are divergence-free by construction: Gaussian vortex fields
``phi = grad(g) x v`` (the curl of ``g v``), linear fields ``B x + b`` with
trace-free ``B`` and a quadratic polynomial field used for closed-form
checks.  Field evaluations accept complex coordinates so that derivatives
with respect to vertices can be taken by complex steps.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np
from scipy.optimize import minimize_scalar

from .core import INF, DomainError, SystemDescription, TestPath
from .saddle import DualBall, PolyhedralWeight

_GL_NODES = np.array([0.5 - 0.5 * math.sqrt(0.6), 0.5, 0.5 + 0.5 * math.sqrt(0.6)])
_GL_WEIGHTS = np.array([5.0, 8.0, 5.0]) / 18.0
BUMP_CONST = 8.0 / (3.0 * math.sqrt(3.0))


@dataclass(frozen=True)
class CurveMeasure:
    vertices: np.ndarray
    density: np.ndarray | None = None
    closed: bool = True

    def __post_init__(self) -> None:
        v = np.asarray(self.vertices, dtype=float)
        if v.ndim != 2 or v.shape[1] != 3:
            raise ValueError("vertices must have shape (N, 3)")
        object.__setattr__(self, "vertices", v)
        n_seg = len(v) if self.closed else len(v) - 1
        dens = np.ones(n_seg) if self.density is None else np.asarray(self.density, float)
        if dens.shape != (n_seg,) or np.any(dens < 0):
            raise ValueError("density needs one non-negative value per segment")
        object.__setattr__(self, "density", dens)
        if n_seg and np.min(self.lengths) <= 1e-12:
            raise ValueError("segments must have positive length")

    @property
    def segments(self) -> np.ndarray:
        v = self.vertices
        if self.closed:
            return np.roll(v, -1, axis=0) - v
        return v[1:] - v[:-1]

    @property
    def starts(self) -> np.ndarray:
        return self.vertices if self.closed else self.vertices[:-1]

    @property
    def lengths(self) -> np.ndarray:
        return np.linalg.norm(self.segments, axis=1)

    @property
    def tangents(self) -> np.ndarray:
        return self.segments / self.lengths[:, None]

    @property
    def midpoints(self) -> np.ndarray:
        return self.starts + 0.5 * self.segments

    def scaled(self, factor: float) -> CurveMeasure:
        return CurveMeasure(factor * self.vertices, self.density, self.closed)

    def with_density(self, density: np.ndarray) -> CurveMeasure:
        return CurveMeasure(self.vertices, density, self.closed)

    def refined(self) -> CurveMeasure:
        """Insert the midpoint of every segment (same measure)."""
        n = len(self.segments)
        v = np.empty((len(self.starts) * 2, 3))
        v[0::2] = self.starts
        v[1::2] = self.midpoints
        if not self.closed:
            v = np.vstack([v, self.vertices[-1]])
        return CurveMeasure(v, np.repeat(self.density, 2)[: 2 * n], self.closed)


def regular_polygon(n: int, radius: float = 1.0, center=(0.0, 0.0, 0.0), offset: float = 0.0) -> CurveMeasure:
    s = 2 * math.pi * (np.arange(n) + offset) / n
    pts = np.stack([radius * np.cos(s), radius * np.sin(s), np.zeros(n)], axis=1) + np.asarray(center, float)
    return CurveMeasure(pts)


class SolenoidalField(Protocol):
    def value(self, x: np.ndarray) -> np.ndarray: ...

    def curl(self, x: np.ndarray) -> np.ndarray: ...

    def grad_curl(self, x: np.ndarray) -> np.ndarray: ...

    def sup_norm_bound(self, box: np.ndarray) -> float: ...

    def support_box(self) -> np.ndarray | None: ...


@dataclass(frozen=True)
class GaussianVortex:
    """``phi = grad(g) x v`` with ``g = amp exp(-|x - c|^2 / (2 s^2))``.

    ``|phi| <= amp |v| exp(-1/2) / s`` everywhere.
    """

    center: np.ndarray
    axis: np.ndarray
    amp: float = 1.0
    width: float = 0.5

    def __post_init__(self) -> None:
        object.__setattr__(self, "center", np.asarray(self.center, float))
        object.__setattr__(self, "axis", np.asarray(self.axis, float))

    def _gauss(self, x):
        r = x - self.center
        s2 = self.width**2
        rr = np.sum(r * r, axis=-1)
        return r, s2, rr, self.amp * np.exp(-rr / (2 * s2))

    def potential(self, x):
        _, _, _, g = self._gauss(x)
        return g[..., None] * self.axis

    def value(self, x):
        r, s2, _, g = self._gauss(x)
        return -(g / s2)[..., None] * np.cross(r, self.axis)

    def jacobian(self, x):
        """``d phi_i / d x_j``."""
        r, s2, _, g = self._gauss(x)
        rv = np.cross(r, self.axis)
        eps = np.zeros((3, 3, 3))
        eps[0, 1, 2] = eps[1, 2, 0] = eps[2, 0, 1] = 1.0
        eps[0, 2, 1] = eps[2, 1, 0] = eps[1, 0, 2] = -1.0
        skew = -np.einsum("ijm,m->ij", eps, self.axis)
        return (g / s2**2)[..., None, None] * rv[..., :, None] * r[..., None, :] + (g / s2)[..., None, None] * skew

    def curl(self, x):
        r, s2, rr, g = self._gauss(x)
        rv = r @ self.axis
        return (g / s2**2)[..., None] * r * rv[..., None] - (g * (rr / s2**2 - 2 / s2))[..., None] * self.axis

    def grad_curl(self, x):
        """``d (curl phi)_i / d x_j``."""
        r, s2, rr, g = self._gauss(x)
        v = self.axis
        rv = r @ v
        s4, s6 = s2 * s2, s2**3
        eye = np.eye(3)
        out = -(rv / s6)[..., None, None] * r[..., :, None] * r[..., None, :]
        out = out + (v[:, None] * r[..., None, :] + r[..., :, None] * v[None, :]) / s4
        out = out + (rv / s4)[..., None, None] * eye
        out = out - ((5 / s4 - rr / s6))[..., None, None] * v[:, None] * r[..., None, :]
        return g[..., None, None] * out

    def sup_norm_bound(self, box: np.ndarray | None = None) -> float:
        return self.amp * float(np.linalg.norm(self.axis)) * math.exp(-0.5) / self.width

    def support_box(self) -> np.ndarray:
        reach = 6.0 * self.width
        return np.stack([self.center - reach, self.center + reach])


@dataclass(frozen=True)
class LinearField:
    """``phi = B x + b`` with trace-free ``B``; its curl is constant."""

    matrix: np.ndarray
    shift: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self) -> None:
        m = np.asarray(self.matrix, float)
        if abs(np.trace(m)) > 1e-12:
            raise ValueError("linear field must be trace-free to be divergence-free")
        object.__setattr__(self, "matrix", m)
        object.__setattr__(self, "shift", np.asarray(self.shift, float))

    def value(self, x):
        return x @ self.matrix.T + self.shift

    def jacobian(self, x):
        return np.broadcast_to(self.matrix, np.shape(x)[:-1] + (3, 3))

    def curl(self, x):
        m = self.matrix
        c = np.array([m[2, 1] - m[1, 2], m[0, 2] - m[2, 0], m[1, 0] - m[0, 1]])
        return np.broadcast_to(c, np.shape(x))

    def grad_curl(self, x):
        return np.zeros(np.shape(x)[:-1] + (3, 3))

    def sup_norm_bound(self, box: np.ndarray) -> float:
        corners = np.array([[box[i, 0], box[j, 1], box[k, 2]] for i in (0, 1) for j in (0, 1) for k in (0, 1)])
        return float(np.max(np.linalg.norm(self.value(corners), axis=1)))

    def support_box(self) -> None:
        return None


@dataclass(frozen=True)
class PolynomialField:
    """``phi = (0, 0, a x y)``: divergence-free with ``grad(curl phi) = diag(a, -a, 0)``."""

    a: float = 1.0

    def value(self, x):
        out = np.zeros(np.shape(x), dtype=np.result_type(x, float))
        out[..., 2] = self.a * x[..., 0] * x[..., 1]
        return out

    def jacobian(self, x):
        out = np.zeros(np.shape(x)[:-1] + (3, 3), dtype=np.result_type(x, float))
        out[..., 2, 0] = self.a * x[..., 1]
        out[..., 2, 1] = self.a * x[..., 0]
        return out

    def curl(self, x):
        out = np.zeros(np.shape(x), dtype=np.result_type(x, float))
        out[..., 0] = self.a * x[..., 0]
        out[..., 1] = -self.a * x[..., 1]
        return out

    def grad_curl(self, x):
        out = np.zeros(np.shape(x)[:-1] + (3, 3))
        out[..., 0, 0] = self.a
        out[..., 1, 1] = -self.a
        return out

    def sup_norm_bound(self, box: np.ndarray) -> float:
        return abs(self.a) * float(np.max(np.abs(box[:, 0])) * np.max(np.abs(box[:, 1])))

    def support_box(self) -> None:
        return None


def _sym(m: np.ndarray) -> np.ndarray:
    return 0.5 * (m + np.swapaxes(m, -1, -2))


def _spectral(m: np.ndarray) -> np.ndarray:
    return np.max(np.abs(np.linalg.eigvalsh(m)), axis=-1)


def sampling_box(fields: Sequence, default: np.ndarray | None = None, margin: float = 1.25) -> np.ndarray:
    """Union of the fields' support boxes enlarged by ``margin`` about its centre."""
    boxes = [f.support_box() for f in fields if f.support_box() is not None]
    if not boxes:
        if default is None:
            raise ValueError("no field provides a support box; pass one explicitly")
        box = np.asarray(default, float)
    else:
        box = np.stack([np.min([b[0] for b in boxes], axis=0), np.max([b[1] for b in boxes], axis=0)])
    centre, half = box.mean(axis=0), 0.5 * (box[1] - box[0])
    return np.stack([centre - margin * half, centre + margin * half])


def _grid(box: np.ndarray, resolution: int) -> np.ndarray:
    axes = [np.linspace(box[0, i], box[1, i], resolution) for i in range(3)]
    return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)


def sup_sym_norm(grad_curl, box: np.ndarray, resolution: int = 64, refine_tol: float = 1e-6) -> float:
    """Sampled supremum of the spectral norm of the symmetric part of ``grad_curl``.

    Grid sampling followed by local grids around the best points, halving
    the spacing until the maximum changes by less than ``refine_tol``.
    """
    pts = _grid(box, resolution)
    vals = _spectral(_sym(grad_curl(pts)))
    best = float(np.max(vals))
    spacing = (box[1] - box[0]) / (resolution - 1)
    seeds = pts[np.argsort(vals)[-8:]]
    for _ in range(30):
        offsets = _grid(np.stack([-spacing, spacing]), 5)
        cand = (seeds[:, None, :] + offsets[None]).reshape(-1, 3)
        cvals = _spectral(_sym(grad_curl(cand)))
        new = max(best, float(np.max(cvals)))
        seeds = cand[np.argsort(cvals)[-8:]]
        spacing = spacing / 2
        if new - best < refine_tol:
            best = new
            break
        best = new
    return best


def bn_K(fld, box: np.ndarray | None = None, resolution: int = 64) -> float:
    """Regularity weight ``3 sup |(grad curl phi)_sym|`` of one field."""
    box = sampling_box([fld], box) if box is None or fld.support_box() is not None else np.asarray(box, float)
    return 3.0 * sup_sym_norm(fld.grad_curl, box, resolution)


def bn_energy(mu: CurveMeasure) -> float:
    if len(mu.segments) == 0:
        return 0.0
    return float(mu.density @ mu.lengths)


def field_pairing(mu: CurveMeasure, fld) -> float:
    """``int phi . d mu`` by 3-point Gauss-Legendre on every segment."""
    e = mu.segments
    total = 0.0
    for u, w in zip(_GL_NODES, _GL_WEIGHTS):
        total += w * float(np.sum(mu.density * np.einsum("ij,ij->i", fld.value(mu.starts + u * e), e)))
    return total


def bn_operator(mu: CurveMeasure, fld) -> float:
    """Midpoint rule for ``int grad(curl phi) : tau x tau d|mu|``."""
    t = mu.tangents
    m = fld.grad_curl(mu.midpoints)
    return float(np.sum(mu.density * mu.lengths * np.einsum("ki,kij,kj->k", t, m, t)))


def weighted_integrand(mu: CurveMeasure, fld, points_per_segment: int = 1, weight: float | None = None) -> np.ndarray:
    """``-grad(curl phi) : tau x tau + 3 |(grad curl phi)_sym|`` along segments.

    With ``weight`` given, the supremum weight replaces the pointwise norm.
    """
    u = (np.arange(points_per_segment) + 0.5) / points_per_segment
    pts = mu.starts[:, None, :] + u[None, :, None] * mu.segments[:, None, :]
    m = fld.grad_curl(pts)
    t = mu.tangents
    quad = np.einsum("ki,kpij,kj->kp", t, m, t)
    third = 3.0 * _spectral(_sym(m)) if weight is None else weight
    return -quad + third


def hom_convexity_threshold(matrix: np.ndarray) -> float:
    m = np.asarray(matrix, float)
    if not np.allclose(m, m.T):
        m = _sym(m)
    lam = np.linalg.eigvalsh(m)
    return float(lam[-1] - 2 * lam[0])


def _hom_function(matrix: np.ndarray, hom_gamma: float):
    def f(xi: np.ndarray) -> np.ndarray:
        norm = np.linalg.norm(xi, axis=-1)
        quad = np.einsum("...i,ij,...j->...", xi, matrix, xi)
        safe = np.where(norm > 0, norm, 1.0)
        return np.where(norm > 0, hom_gamma * norm + quad / safe, 0.0)

    return f


@dataclass
class HomProbe:
    convex: bool
    worst_violation: float
    witness: tuple[np.ndarray, np.ndarray] | None = None


def hom_convexity_probe(
    matrix: np.ndarray, hom_gamma: float, n_samples: int = 10_000, seed: int = 0, tol: float = 1e-10
) -> HomProbe:
    """Midpoint convexity of ``xi -> hom_gamma |xi| + M xi . xi / |xi|``.

    Random pairs (including pairs through the origin) plus a targeted pair
    ``xi +- eps eta`` with ``xi`` the top and ``eta`` the bottom eigenvector,
    the direction in which the second variation is smallest.
    """
    m = _sym(np.asarray(matrix, float))
    f = _hom_function(m, hom_gamma)
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((n_samples, 3))
    b = rng.standard_normal((n_samples, 3))
    b[: n_samples // 10] = -a[: n_samples // 10] * rng.uniform(0.1, 2.0, size=(n_samples // 10, 1))
    viol = f(0.5 * (a + b)) - 0.5 * (f(a) + f(b))
    k = int(np.argmax(viol))
    worst, witness = float(viol[k]), (a[k], b[k])
    lam, vec = np.linalg.eigh(m)
    xi, eta = vec[:, -1], vec[:, 0]
    for eps in (1e-1, 3e-2, 1e-2):
        pa, pb = xi + eps * eta, xi - eps * eta
        v = float(f(xi) - 0.5 * (f(pa) + f(pb)))
        if v > worst:
            worst, witness = v, (pa, pb)
    convex = worst <= tol
    return HomProbe(convex, worst, None if convex else witness)


def binormal_velocity(mu: CurveMeasure, index: int) -> np.ndarray:
    """Discrete binormal at a vertex: ``t_prev x t_next`` over the mean adjacent length."""
    segs = mu.segments
    n = len(segs)
    if not mu.closed and not 0 < index < len(mu.vertices) - 1:
        raise ValueError("binormal velocity needs two adjacent segments")
    prev, nxt = segs[(index - 1) % n], segs[index % n]
    lp, ln = np.linalg.norm(prev), np.linalg.norm(nxt)
    tp, tn = prev / lp, nxt / ln
    if np.dot(tp, tn) <= -1 + 1e-12:
        raise DomainError("adjacent segments fold back onto each other")
    return np.cross(tp, tn) / (0.5 * (lp + ln))


class SmoothCurve(Protocol):
    length: float

    def point(self, t: float, s) -> np.ndarray: ...

    def d1(self, t: float, s) -> np.ndarray: ...

    def d2(self, t: float, s) -> np.ndarray: ...

    def d3(self, t: float, s) -> np.ndarray: ...

    def velocity(self, t: float, s) -> np.ndarray: ...

    def reach(self, t: float) -> float: ...


@dataclass(frozen=True)
class TranslatingCircle:
    """Exact binormal solution: a circle of radius ``R`` moving with speed ``1/R`` along its normal."""

    radius: float = 1.0
    center: tuple[float, float, float] = (0.0, 0.0, 0.0)

    @property
    def length(self) -> float:
        return 2 * math.pi * self.radius

    def _frame(self, s):
        a = np.asarray(s, float) / self.radius
        return np.cos(a)[..., None], np.sin(a)[..., None]

    def point(self, t, s):
        c, si = self._frame(s)
        e1, e2, n = np.eye(3)
        return np.asarray(self.center) + self.radius * (c * e1 + si * e2) + (t / self.radius) * n

    def d1(self, t, s):
        c, si = self._frame(s)
        e1, e2, _ = np.eye(3)
        return -si * e1 + c * e2

    def d2(self, t, s):
        c, si = self._frame(s)
        e1, e2, _ = np.eye(3)
        return -(c * e1 + si * e2) / self.radius

    def d3(self, t, s):
        c, si = self._frame(s)
        e1, e2, _ = np.eye(3)
        return (si * e1 - c * e2) / self.radius**2

    def velocity(self, t, s):
        return np.broadcast_to(np.array([0.0, 0.0, 1.0 / self.radius]), np.shape(self.point(t, s)))

    def reach(self, t: float) -> float:
        return self.radius

    def polygon(self, t: float, n: int) -> CurveMeasure:
        return CurveMeasure(self.point(t, self.length * np.arange(n) / n))


def curve_binormal(curve: SmoothCurve, t: float, s) -> np.ndarray:
    return np.cross(curve.d1(t, s), curve.d2(t, s))


def security_radius(curve: SmoothCurve, times: Sequence[float], n_samples: int = 1000) -> float:
    """``r = 1/2 min_t min(1/sup|d_ss gamma|, reach)``."""
    s = np.linspace(0, curve.length, n_samples, endpoint=False)
    vals = []
    for t in times:
        curv = float(np.max(np.linalg.norm(curve.d2(t, s), axis=-1)))
        vals.append(min(1.0 / curv, curve.reach(t)))
    return 0.5 * min(vals)


@dataclass
class GronwallConstant:
    value: float
    radius: float
    sup_third: float
    safety_value: float


def gronwall_constant(curve: SmoothCurve, horizon: float, n_time: int = 1000, n_arc: int = 1000) -> GronwallConstant:
    """``K = 54/r^2 + 14 sup |d_sss gamma|`` from sampled derivatives.

    ``safety_value`` repeats the formula with the sampled supremum doubled.
    """
    times = np.linspace(0.0, horizon, n_time)
    s = np.linspace(0, curve.length, n_arc, endpoint=False)
    r = security_radius(curve, times[:: max(1, n_time // 50)], n_arc)
    third = max(float(np.max(np.linalg.norm(curve.d3(t, s), axis=-1))) for t in times)
    return GronwallConstant(54 / r**2 + 14 * third, r, third, 54 / r**2 + 28 * third)


def closest_point(curve: SmoothCurve, t: float, x: np.ndarray, seeds: int = 64, tol: float = 1e-12) -> tuple[float, float]:
    """Arc parameter and distance of the closest curve point to ``x``."""
    s = np.linspace(0, curve.length, seeds, endpoint=False)
    d2 = np.sum((curve.point(t, s) - x) ** 2, axis=-1)
    k = int(np.argmin(d2))
    h = curve.length / seeds
    res = minimize_scalar(
        lambda q: float(np.sum((curve.point(t, q) - x) ** 2)),
        bounds=(s[k] - h, s[k] + h),
        method="bounded",
        options={"xatol": tol},
    )
    return float(res.x % curve.length), math.sqrt(max(float(res.fun), 0.0))


def cutoff(d2: np.ndarray | float, r: float) -> np.ndarray:
    q = np.asarray(d2, float) / r**2
    return np.where(q < 1.0, (1.0 - np.minimum(q, 1.0)) ** 3, 0.0)


def tubular_field(curve: SmoothCurve, x: np.ndarray, t: float, r: float) -> np.ndarray:
    """``f(dist^2) tau(P x)`` with the cubic cutoff ``(1 - d^2/r^2)^3``."""
    s, d = closest_point(curve, t, np.asarray(x, float))
    if d >= r:
        return np.zeros(3)
    tan = curve.d1(t, s)
    return float(cutoff(d * d, r)) * tan / np.linalg.norm(tan)


def relative_energy(mu: CurveMeasure, aux_energy: float, curve: SmoothCurve, t: float, r: float) -> float:
    """``E - energy(mu) + sum (1 - X . tau) theta |e|`` with the tubular field ``X``."""
    mids, tans = mu.midpoints, mu.tangents
    dots = np.array([tubular_field(curve, p, t, r) @ tk for p, tk in zip(mids, tans)])
    return aux_energy - bn_energy(mu) + float(np.sum((1 - dots) * mu.density * mu.lengths))


def tubular_sym_grad_curl(curve: SmoothCurve, t: float, r: float, n_points: int = 200, h: float = 1e-4, seed: int = 0) -> float:
    """Sampled sup of ``|(grad curl X)_sym|`` in the tube, by central differences."""
    rng = np.random.default_rng(seed)
    s = rng.uniform(0, curve.length, n_points)
    base = curve.point(t, s)
    offs = rng.standard_normal((n_points, 3))
    offs *= (rng.uniform(0, 0.9 * r, n_points) / np.linalg.norm(offs, axis=1))[:, None]
    pts = base + offs

    def X(p):
        return tubular_field(curve, p, t, r)

    def curl(p):
        j = np.zeros((3, 3))
        for k in range(3):
            e = np.zeros(3)
            e[k] = h
            j[:, k] = (X(p + e) - X(p - e)) / (2 * h)
        return np.array([j[2, 1] - j[1, 2], j[0, 2] - j[2, 0], j[1, 0] - j[0, 1]])

    best = 0.0
    for p in pts:
        g = np.zeros((3, 3))
        for k in range(3):
            e = np.zeros(3)
            e[k] = h
            g[:, k] = (curl(p + e) - curl(p - e)) / (2 * h)
        best = max(best, float(_spectral(_sym(g))))
    return best


@dataclass
class MonitorReport:
    times: np.ndarray
    relative: np.ndarray
    envelope: np.ndarray
    rate: float
    gronwall: float
    allowance: float
    margins: np.ndarray

    @property
    def within(self) -> bool:
        return bool(np.all(self.margins >= 0))


def weak_strong_monitor(
    measures: Sequence[CurveMeasure],
    aux_energy: Sequence[float],
    times: Sequence[float],
    curve: SmoothCurve,
    allowance: float | None = None,
) -> MonitorReport:
    """Relative energy along a trajectory against the Gronwall envelope.

    ``rate = max(K, 3 |(grad curl X)_sym|)``; the allowance defaults to
    ``5 / N^2`` for ``N``-gons.  Reports margins and asserts nothing.
    """
    times = np.asarray(times, float)
    g = gronwall_constant(curve, float(times[-1]) if times[-1] > 0 else 1.0, 200, 400)
    r = g.radius
    sym = tubular_sym_grad_curl(curve, float(times[0]), r)
    rate = max(g.value, 3 * sym)
    allowance = 5.0 / len(measures[0].segments) ** 2 if allowance is None else allowance
    rel = np.array([relative_energy(mu, e, curve, t, r) for mu, e, t in zip(measures, aux_energy, times)])
    env = rel[0] * np.exp(rate * (times - times[0])) + allowance
    return MonitorReport(times, rel, env, rate, g.value, allowance, env - rel)


@dataclass
class DensityReport:
    deviation: float
    residual: float
    constant: float
    lower_bound: float
    divergence_free: bool


def constant_density_check(mu: CurveMeasure, tol: float = 1e-12) -> DensityReport:
    """Divergence residual against localized gradient tests and the density spread.

    Test functions are bumps ``psi_k = r_k (1 - |x - x_k|^2/r_k^2)^2 / c`` with
    ``|grad psi_k| <= 1``, centred at vertices with ``r_k`` half the distance
    to the nearest other vertex, so ``<mu, grad psi_k> = psi_k(x_k) (theta_{k-1} - theta_k)``.
    """
    v = mu.vertices
    n = len(v)
    dist = np.linalg.norm(v[:, None, :] - v[None, :, :], axis=-1)
    np.fill_diagonal(dist, np.inf)
    radii = 0.5 * np.min(dist, axis=1)
    theta = mu.density
    if mu.closed:
        jumps = np.roll(theta, 1) - theta
    else:
        padded = np.concatenate([[0.0], theta, [0.0]])
        jumps = padded[:-1] - padded[1:]
    res = float(np.max(np.abs(radii * jumps / BUMP_CONST)))
    constant = BUMP_CONST * float(np.sum(1.0 / radii))
    spread = float(np.max(theta) - np.min(theta)) if len(theta) else 0.0
    nonzero = np.abs(jumps) > 0
    lower = float(np.max(np.abs(jumps[nonzero]))) * float(np.min(radii)) / BUMP_CONST if np.any(nonzero) else 0.0
    return DensityReport(spread, res, constant, lower, mu.closed and res <= tol)


def weakform_residual(
    times: np.ndarray,
    measures: Sequence[CurveMeasure],
    fields: Sequence,
    path: TestPath,
    s: float,
    t: float,
) -> float:
    """``[int X . dmu]_s^t - trapezoid(int dX/dt . dmu - <A(mu), X>)``.

    ``X(t) = sum_k c_k(t) fields[k]`` with coefficients from ``path``.
    """
    times = np.asarray(times, float)
    hits = [np.flatnonzero(np.isclose(times, q, rtol=0, atol=1e-12)) for q in (s, t)]
    if any(len(h) != 1 for h in hits):
        raise ValueError("s and t must lie on the time grid")
    i, j = int(hits[0][0]), int(hits[1][0])
    pair = np.array([[field_pairing(mu, f) for f in fields] for mu in measures[i : j + 1]])
    ops = np.array([[bn_operator(mu, f) for f in fields] for mu in measures[i : j + 1]])
    coef = np.array([path(q) for q in times[i : j + 1]])
    rate = np.array([path.time_derivative(q) for q in times[i : j + 1]])
    boundary = coef[-1] @ pair[-1] - coef[0] @ pair[0]
    integrand = np.einsum("nk,nk->n", rate, pair) - np.einsum("nk,nk->n", coef, ops)
    dt = np.diff(times[i : j + 1])
    return float(boundary - np.sum(0.5 * dt * (integrand[1:] + integrand[:-1])))


# basis, system and step model


def null_fields() -> list[LinearField]:
    """Constant, rotational and symmetric trace-free linear fields."""
    out = []
    for k in range(3):
        b = np.zeros(3)
        b[k] = 1.0
        out.append(LinearField(np.zeros((3, 3)), b))
    for i, j in ((1, 2), (2, 0), (0, 1)):
        m = np.zeros((3, 3))
        m[i, j], m[j, i] = -1.0, 1.0
        out.append(LinearField(m))
    for i, j in ((0, 1), (0, 2), (1, 2)):
        m = np.zeros((3, 3))
        m[i, j] = m[j, i] = 1.0
        out.append(LinearField(m))
    out.append(LinearField(np.diag([1.0, -1.0, 0.0])))
    out.append(LinearField(np.diag([1.0, 1.0, -2.0]) / math.sqrt(3)))
    return out


def vortex_fields(count: int = 5, seed: int = 0, radius: float = 1.0) -> list[GaussianVortex]:
    """Gaussian vortices centred near a circle of the given radius, sup-norm 1/2."""
    rng = np.random.default_rng(seed)
    out = []
    for k in range(count):
        ang = 2 * math.pi * (k + rng.uniform(0, 0.5)) / count
        c = radius * np.array([math.cos(ang), math.sin(ang), rng.uniform(-0.3, 0.3)])
        c += 0.2 * rng.standard_normal(3)
        axis = rng.standard_normal(3)
        axis /= np.linalg.norm(axis)
        width = radius * rng.uniform(0.4, 0.8)
        amp = 0.5 * width * math.exp(0.5)
        out.append(GaussianVortex(c, axis, amp, width))
    return out


def shipped_fields(radius: float = 1.0) -> list[GaussianVortex]:
    """Eight Gaussian vortex fields around the unit-circle configuration."""
    return vortex_fields(8, seed=7, radius=radius)


class FieldBasis:
    """Finite list of divergence-free fields with precomputed weight samples."""

    def __init__(self, fields: Sequence, box: np.ndarray, resolution: int = 24, directions: int = 9) -> None:
        self.fields = list(fields)
        self.box = np.asarray(box, float)
        self.resolution = resolution
        self.null = [k for k, f in enumerate(self.fields) if isinstance(f, LinearField)]
        self.bounded = [k for k in range(len(self.fields)) if k not in self.null]
        pts = _grid(self.box, resolution)
        self.sample_points = pts
        self.sym_samples = np.stack([_sym(f.grad_curl(pts)) for f in self.fields], axis=1)
        dirs = [np.eye(3)[i] for i in range(3)]
        for i, j in ((0, 1), (0, 2), (1, 2)):
            d = np.zeros(3)
            d[i], d[j] = 1.0, 1.0
            dirs.append(d / math.sqrt(2))
        self.directions = np.array(dirs[:directions])

    def __len__(self) -> int:
        return len(self.fields)

    def combined_grad_curl(self, coeffs: np.ndarray):
        def grad_curl(x):
            out = np.zeros(np.shape(x)[:-1] + (3, 3))
            for c, f in zip(coeffs, self.fields):
                if c != 0.0:
                    out = out + c * f.grad_curl(x)
            return out

        return grad_curl

    def weight(self, coeffs: np.ndarray, refine: bool = True) -> float:
        """``3 sup_x |sum_k c_k (grad curl phi_k)_sym(x)|`` over the sampling box."""
        coeffs = np.asarray(coeffs, float)
        if not np.any(coeffs[self.bounded]):
            return 0.0
        mats = np.einsum("k,pkij->pij", coeffs, self.sym_samples)
        vals = _spectral(mats)
        best = float(np.max(vals))
        if not refine:
            return 3.0 * best
        spacing = (self.box[1] - self.box[0]) / (self.resolution - 1)
        seeds = self.sample_points[np.argsort(vals)[-4:]]
        grad_curl = self.combined_grad_curl(coeffs)
        for _ in range(20):
            offsets = _grid(np.stack([-spacing, spacing]), 5)
            cand = (seeds[:, None, :] + offsets[None]).reshape(-1, 3)
            cvals = _spectral(_sym(grad_curl(cand)))
            new = max(best, float(np.max(cvals)))
            seeds = cand[np.argsort(cvals)[-4:]]
            spacing = spacing / 2
            done = new - best < 1e-6 * max(1.0, new)
            best = new
            if done:
                break
        return 3.0 * best

    def polyhedral_weight(self) -> PolyhedralWeight:
        """Lower polyhedral model of :meth:`weight` from quadratic forms ``d^T S d``.

        Being smaller than the weight, it describes a larger dual ball, so
        suprema over it bound suprema over the true ball from above.  Rows
        below a thousandth of the largest row are dropped for the same reason.
        """
        quad = np.einsum("di,pkij,dj->pdk", self.directions, self.sym_samples, self.directions)
        rows = quad.reshape(-1, len(self.fields))
        size = np.max(np.abs(rows), axis=1)
        rows = rows[size > 1e-3 * max(float(np.max(size, initial=0.0)), 1e-300)]
        rows = np.unique(np.round(rows, 12), axis=0)
        return PolyhedralWeight(((3.0, np.vstack([rows, -rows])),))

    def sup_norm_bound(self, coeffs: np.ndarray) -> float:
        return float(sum(abs(c) * f.sup_norm_bound(self.box) for c, f in zip(coeffs, self.fields) if c != 0.0))


def _segment_terms(a, b, theta, fields, tau):
    """Per-segment pairing and operator contributions, shape ``(n_seg, n_fields)``."""
    e = b - a
    length = np.sqrt(np.sum(e * e, axis=-1))
    mid = 0.5 * (a + b)
    pair = np.zeros(e.shape[:-1] + (len(fields),), dtype=np.result_type(a, float))
    op = np.zeros_like(pair)
    for k, f in enumerate(fields):
        acc = 0.0
        for u, w in zip(_GL_NODES, _GL_WEIGHTS):
            acc = acc + w * np.sum(f.value(a + u * e) * e, axis=-1)
        pair[..., k] = theta * acc
        if not isinstance(f, LinearField):
            m = f.grad_curl(mid)
            op[..., k] = theta * np.einsum("...i,...ij,...j->...", e, m, e) / length
    return pair, op


class BinormalSystemData:
    def __init__(self, n_vertices: int, density: np.ndarray, basis: FieldBasis) -> None:
        self.n = n_vertices
        self.density = np.asarray(density, float)
        self.basis = basis

    def measure(self, u: np.ndarray) -> CurveMeasure:
        return CurveMeasure(np.asarray(u, float).reshape(self.n, 3), self.density)

    def energy(self, u: np.ndarray) -> float:
        v = np.asarray(u, float).reshape(self.n, 3)
        e = np.roll(v, -1, axis=0) - v
        return float(self.density @ np.linalg.norm(e, axis=1))

    def field_values(self, u: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        v = np.asarray(u, float).reshape(self.n, 3)
        pair, op = _segment_terms(v, np.roll(v, -1, axis=0), self.density, self.basis.fields, 1.0)
        return pair.sum(axis=0), op.sum(axis=0)

    def pairing(self, u: np.ndarray, c: np.ndarray) -> float:
        return float(self.field_values(u)[0] @ c)

    def operator(self, t: float, u: np.ndarray, c: np.ndarray) -> float:
        v = np.asarray(u, float).reshape(self.n, 3)
        if np.min(np.linalg.norm(np.roll(v, -1, axis=0) - v, axis=1)) <= 1e-12:
            raise DomainError("degenerate segment")
        return float(self.field_values(u)[1] @ c)

    def test_admissible(self, c: np.ndarray) -> tuple[bool, str]:
        bound = self.basis.sup_norm_bound(c)
        if bound > 1.0 + 1e-12:
            return False, f"certified sup-norm bound {bound:.4g} exceeds 1"
        return True, ""

    def dual_ball(self, tau: float) -> DualBall:
        return DualBall(np.eye(len(self.basis)), 1.0 / tau, self.basis.polyhedral_weight(), tuple(self.basis.null))


class BinormalStepModel:
    """Reduced step problem in vertex coordinates.

    Length derivatives are analytic; derivatives of the field terms are taken
    per segment by complex steps (first order) and central differences of
    complex steps (second order).  Constraints that vanish identically on
    closed polygons are left to the a-posteriori null check.
    """

    H = 1e-20
    DELTA = 1e-5

    def __init__(self, data: BinormalSystemData, step, ball: DualBall) -> None:
        self.data, self.step, self.ball = data, step, ball
        self.tau = step.tau
        self.n = data.n
        self.dim = 3 * data.n
        self.theta = data.density
        self.fields = data.basis.fields
        self.prev_pair = data.field_values(step.prev_state)[0]
        self.prev_energy = step.prev_energy
        jac = self._jacobian_full(np.asarray(step.prev_state, float))
        scale = max(1.0, float(np.max(np.abs(jac))))
        live = np.flatnonzero(np.max(np.abs(jac), axis=1) > 1e-9 * scale)
        self.newton_indices = live

    def state(self, z: np.ndarray) -> np.ndarray:
        return z

    def coords(self, u: np.ndarray) -> np.ndarray:
        return np.asarray(u, float).copy()

    def _ends(self, z):
        v = z.reshape(self.n, 3)
        return v, np.roll(v, -1, axis=0)

    def admissible(self, z: np.ndarray) -> bool:
        a, b = self._ends(z)
        return bool(np.all(np.isfinite(z)) and np.min(np.linalg.norm(b - a, axis=1)) > 1e-10)

    def base(self, z: np.ndarray) -> float:
        return self.data.energy(z) - self.prev_energy

    def base_derivatives(self, z: np.ndarray):
        a, b = self._ends(z)
        e = b - a
        length = np.linalg.norm(e, axis=1)
        t = e / length[:, None]
        grad = np.zeros((self.n, 3))
        w = self.theta[:, None]
        grad -= w * t
        grad += np.roll(w * t, 1, axis=0)
        hess = np.zeros((self.dim, self.dim))
        blocks = self.theta[:, None, None] * (np.eye(3) - t[:, :, None] * t[:, None, :]) / length[:, None, None]
        for k in range(self.n):
            i, j = k, (k + 1) % self.n
            si, sj = slice(3 * i, 3 * i + 3), slice(3 * j, 3 * j + 3)
            hess[si, si] += blocks[k]
            hess[sj, sj] += blocks[k]
            hess[si, sj] -= blocks[k]
            hess[sj, si] -= blocks[k]
        return grad.ravel(), hess

    def _combined(self, a, b):
        pair, op = _segment_terms(a, b, self.theta, self.fields, 1.0)
        return pair + self.tau * op

    def linear_part(self, z: np.ndarray) -> np.ndarray:
        a, b = self._ends(z)
        return self._combined(a, b).sum(axis=0) - self.prev_pair

    def constraints(self, z: np.ndarray) -> np.ndarray:
        return self.linear_part(z)[self.newton_indices]

    def _local_gradients(self, a, b, weights=None):
        """Complex-step derivatives of segment terms w.r.t. the 6 end coordinates."""
        out = []
        for c in range(6):
            ac, bc = a.astype(complex), b.astype(complex)
            if c < 3:
                ac[:, c] += 1j * self.H
            else:
                bc[:, c - 3] += 1j * self.H
            vals = self._combined(ac, bc)
            if weights is not None:
                vals = vals @ weights
            out.append(vals.imag / self.H)
        return out

    def _scatter_jacobian(self, grads) -> np.ndarray:
        jac = np.zeros((len(self.fields), self.n, 3))
        for c, g in enumerate(grads):
            if c < 3:
                jac[:, :, c] += g.T
            else:
                jac[:, :, c - 3] += np.roll(g, 1, axis=0).T
        return jac.reshape(len(self.fields), -1)

    def _jacobian_full(self, z: np.ndarray) -> np.ndarray:
        a, b = self._ends(z)
        return self._scatter_jacobian(self._local_gradients(a, b))

    def constraint_jacobian(self, z: np.ndarray) -> np.ndarray:
        return self._jacobian_full(z)[self.newton_indices]

    def constraint_curvature(self, z: np.ndarray, lam: np.ndarray) -> np.ndarray:
        weights = np.zeros(len(self.fields))
        weights[self.newton_indices] = lam
        a, b = self._ends(z)
        local = np.zeros((self.n, 6, 6))
        for d in range(6):
            shifts = []
            for sign in (1.0, -1.0):
                ad, bd = a.copy(), b.copy()
                if d < 3:
                    ad[:, d] += sign * self.DELTA
                else:
                    bd[:, d - 3] += sign * self.DELTA
                shifts.append(self._local_gradients(ad, bd, weights))
            for c in range(6):
                local[:, c, d] = (shifts[0][c] - shifts[1][c]) / (2 * self.DELTA)
        local = 0.5 * (local + np.swapaxes(local, 1, 2))
        hess = np.zeros((self.dim, self.dim))
        for k in range(self.n):
            idx = np.r_[3 * k : 3 * k + 3, 3 * ((k + 1) % self.n) : 3 * ((k + 1) % self.n) + 3]
            hess[np.ix_(idx, idx)] += local[k]
        return hess


def make_system(
    n_vertices: int,
    density: np.ndarray | None = None,
    fields: Sequence | None = None,
    box: np.ndarray | None = None,
    resolution: int = 24,
) -> SystemDescription:
    """Binormal system on closed ``n_vertices``-gons with a fixed field basis.

    The default basis has the 11 linear null fields and 5 Gaussian vortices.
    """
    density = np.ones(n_vertices) if density is None else np.asarray(density, float)
    fields = list(null_fields()) + vortex_fields(5) if fields is None else list(fields)
    box = sampling_box(fields, box)
    basis = FieldBasis(fields, box, resolution)
    data = BinormalSystemData(n_vertices, density, basis)

    def state_norm(u):
        return data.energy(u)

    def dual_norm(c):
        return basis.sup_norm_bound(c)

    def test_norm(c):
        return basis.weight(c) / 3.0

    return SystemDescription(
        name="binormal_flow",
        state_dim=3 * n_vertices,
        test_dim=len(fields),
        energy=data.energy,
        dissipation=lambda t, u: 0.0,
        operator=data.operator,
        reg_weight=basis.weight,
        reg_weight_aux=basis.weight,
        coercivity=(1.0, 0.0),
        lower_bound_const=lambda r: 0.0,
        pairing=data.pairing,
        state_norm=state_norm,
        test_norm=test_norm,
        dual_norm=dual_norm,
        autonomous=True,
        dual_ball=data.dual_ball,
        step_model=lambda step, ball: BinormalStepModel(data, step, ball),
        params={"data": data, "basis": basis, "test_admissible": data.test_admissible, "n_vertices": n_vertices},
    )


def vector_area(u: np.ndarray) -> np.ndarray:
    v = np.asarray(u, float).reshape(-1, 3)
    return 0.5 * np.sum(np.cross(v, np.roll(v, -1, axis=0)), axis=0)


def test_paths(system: SystemDescription, horizon: float, count: int = 8, seed: int = 0) -> list[TestPath]:
    """Time-dependent combinations of the Gaussian vortices with sup-norm at most 1."""
    basis: FieldBasis = system.params["basis"]
    rng = np.random.default_rng(seed)
    paths = []
    for j in range(count):
        k = basis.bounded[j % len(basis.bounded)]
        d = np.zeros(len(basis))
        d[k] = 1.0
        amp = rng.uniform(0.0, 0.4)
        offset = rng.uniform(-0.5, 0.5)
        freq = 2 * math.pi / max(horizon, 1e-12)
        path = TestPath(f"bn-{j}", d[None, :], offset, 0.0, amp, freq, rng.uniform(0, 2 * math.pi))
        peak = (abs(offset) + amp) * basis.sup_norm_bound(d)
        if peak > 1.0:
            path = path.scaled(1.0 / peak)
        paths.append(path)
    return paths
