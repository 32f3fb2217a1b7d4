"""Per-step convex-concave solver.

The step objective is written as ``F(z|c) = base(z) - c . g(z)`` where ``z``
are reduced primal coordinates and ``c`` the coefficients of the dual basis.
Coefficients along null directions of the auxiliary weight are unconstrained,
so the corresponding ``g`` components must vanish; bounded directions live in
the ball ``{weight(c) <= limit}``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Protocol

import numpy as np
from scipy.optimize import linprog

from .core import INF, ContractViolation, DomainError

KKT_RCOND = 1e-10


@dataclass(frozen=True)
class PolyhedralWeight:
    """``sum_j coef_j * max(0, max_i (G_j c)_i)`` for coefficient vectors ``c``.

    Positively 1-homogeneous and convex.  Rows of ``G_j`` are linear
    functionals of the coefficients, e.g. point samples of a derivative.
    """

    blocks: tuple[tuple[float, np.ndarray], ...]

    def __call__(self, coeffs: np.ndarray) -> float:
        c = np.asarray(coeffs, dtype=float)
        total = 0.0
        for coef, rows in self.blocks:
            if rows.shape[0]:
                total += coef * max(0.0, float(np.max(rows @ c)))
        return total


@dataclass(frozen=True)
class DualBall:
    """Dual search space: span of ``basis`` cut by ``weight(c) <= limit``."""

    basis: np.ndarray
    limit: float
    weight: Callable[[np.ndarray], float]
    null_directions: tuple[int, ...] = ()

    @property
    def size(self) -> int:
        return self.basis.shape[0]

    @property
    def bounded(self) -> np.ndarray:
        mask = np.ones(self.size, dtype=bool)
        mask[list(self.null_directions)] = False
        return np.flatnonzero(mask)

    def test_vector(self, coeffs: np.ndarray) -> np.ndarray:
        return np.asarray(coeffs, dtype=float) @ self.basis


def project_dual(coeffs: np.ndarray, ball: DualBall) -> np.ndarray:
    """Radial projection onto the ball; null components are left untouched."""
    coeffs = np.asarray(coeffs, dtype=float)
    value = ball.weight(coeffs)
    if value < 0:
        raise ContractViolation(f"auxiliary weight evaluated to {value}")
    if value <= ball.limit:
        return coeffs.copy()
    out = coeffs.copy()
    idx = ball.bounded
    out[idx] *= ball.limit / value
    return out


class SaddleProblem(Protocol):
    """Reduced step problem consumed by :func:`solve_saddle`.

    ``constraints`` are the components of ``g`` at the dual indices
    ``newton_indices`` (bounded directions plus null directions that were not
    eliminated by the parametrization).  ``linear_part`` returns ``g`` over
    the full dual basis, evaluated on the full state.
    """

    dim: int
    newton_indices: np.ndarray

    def base(self, z: np.ndarray) -> float: ...

    def base_derivatives(self, z: np.ndarray) -> tuple[np.ndarray, np.ndarray]: ...

    def constraints(self, z: np.ndarray) -> np.ndarray: ...

    def constraint_jacobian(self, z: np.ndarray) -> np.ndarray: ...

    def constraint_curvature(self, z: np.ndarray, lam: np.ndarray) -> np.ndarray: ...

    def linear_part(self, z: np.ndarray) -> np.ndarray: ...

    def admissible(self, z: np.ndarray) -> bool: ...


@dataclass
class SaddleResult:
    primal: np.ndarray
    gap_estimate: float
    certifying_coeffs: np.ndarray
    iterations: int
    converged: bool
    method: str = "lagrange-newton"
    history: list[float] = field(default_factory=list)
    diagnostics: dict = field(default_factory=dict)


def _lp_sup(linear: np.ndarray, ball: DualBall) -> tuple[float, np.ndarray] | None:
    """Exact ``max linear . c`` over the polyhedral ball on bounded directions."""
    weight = ball.weight
    if not isinstance(weight, PolyhedralWeight):
        return None
    idx = ball.bounded
    k = len(idx)
    nblocks = len(weight.blocks)
    if k == 0 or ball.limit == 0.0:
        return 0.0, np.zeros(ball.size)
    a_rows, b_rows = [], []
    for j, (coef, rows) in enumerate(weight.blocks):
        sub = rows[:, idx]
        slack = np.zeros((rows.shape[0], nblocks))
        slack[:, j] = -1.0
        a_rows.append(np.hstack([sub, slack]))
        b_rows.append(np.zeros(rows.shape[0]))
    top = np.zeros(k + nblocks)
    top[k:] = [coef for coef, _ in weight.blocks]
    a_ub = np.vstack(a_rows + [top[None, :]])
    b_ub = np.concatenate(b_rows + [np.array([ball.limit])])
    obj = np.zeros(k + nblocks)
    obj[:k] = -linear[idx]
    bounds = [(None, None)] * k + [(0, None)] * nblocks
    res = linprog(obj, A_ub=a_ub, b_ub=b_ub, bounds=bounds, method="highs")
    if res.status == 3:
        return INF, np.zeros(ball.size)
    if res.status != 0:
        return None
    coeffs = np.zeros(ball.size)
    coeffs[idx] = res.x[:k]
    return float(linear @ coeffs), coeffs


def sup_objective(
    problem: SaddleProblem,
    z: np.ndarray,
    ball: DualBall,
    n_samples: int = 64,
    rng: np.random.Generator | None = None,
    null_tol: float = 1e-10,
) -> tuple[float, np.ndarray]:
    """Best found ``sup_c F(z|c)`` over the ball and the maximizing coefficients.

    The value is signed: a non-positive number certifies the step inequality.
    Non-vanishing null-direction components make the supremum infinite.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    base = problem.base(z)
    if not math.isfinite(base):
        return INF, np.zeros(ball.size)
    g = np.asarray(problem.linear_part(z), dtype=float)
    linear = -g
    scale = max(1.0, float(np.max(np.abs(g))) if g.size else 1.0)
    null = list(ball.null_directions)
    if null and np.max(np.abs(g[null])) > null_tol * scale:
        j = null[int(np.argmax(np.abs(g[null])))]
        coeffs = np.zeros(ball.size)
        coeffs[j] = math.copysign(1.0, linear[j])
        return INF, coeffs
    best, best_c = base, np.zeros(ball.size)
    lp = _lp_sup(linear, ball)
    if lp is not None:
        value, coeffs = lp
        if not math.isfinite(value):
            return INF, coeffs
        coeffs = project_dual(coeffs, ball)
        value = base + float(linear @ coeffs)
        if value > best:
            best, best_c = value, coeffs
    idx = ball.bounded
    if len(idx) and ball.limit > 0:
        # greedy direction plus random boundary points
        candidates = [linear * np.isin(np.arange(ball.size), idx)]
        for _ in range(n_samples):
            c = np.zeros(ball.size)
            c[idx] = rng.standard_normal(len(idx))
            candidates.append(c)
        for c in candidates:
            w = ball.weight(c)
            if w <= 0:
                continue
            c = c * (ball.limit / w)
            c = project_dual(c, ball)
            value = base + float(linear @ c)
            if value > best:
                best, best_c = value, c
    return best, best_c


def estimate_sup_gap(
    problem: SaddleProblem,
    candidate: np.ndarray,
    ball: DualBall,
    n_samples: int = 64,
    rng: np.random.Generator | None = None,
) -> float:
    return sup_objective(problem, candidate, ball, n_samples, rng)[0]


def _lagrange_newton(
    problem: SaddleProblem, z0: np.ndarray, max_iter: int, tol: float
) -> tuple[np.ndarray, np.ndarray, int, bool, float]:
    z = np.array(z0, dtype=float)
    grad, _ = problem.base_derivatives(z)
    jac = problem.constraint_jacobian(z)
    lam = np.linalg.lstsq(jac.T, grad, rcond=None)[0] if jac.size else np.zeros(0)

    def kkt_residual(z: np.ndarray, lam: np.ndarray) -> tuple[np.ndarray, float]:
        grad, _ = problem.base_derivatives(z)
        jac = problem.constraint_jacobian(z)
        g = problem.constraints(z)
        r = np.concatenate([grad - jac.T @ lam, g])
        return r, float(np.max(np.abs(r))) if r.size else 0.0

    r, norm = kkt_residual(z, lam)
    it = 0
    stalled = 0
    best, since_best = norm, 0
    for it in range(1, max_iter + 1):
        if norm <= tol:
            return z, lam, it - 1, True, norm
        _, hess = problem.base_derivatives(z)
        jac = problem.constraint_jacobian(z)
        m = len(lam)
        h = hess - problem.constraint_curvature(z, lam)
        kkt = np.block([[h, -jac.T], [jac, np.zeros((m, m))]])
        # truncated least squares drops nearly free directions (e.g. motions
        # that change neither the base nor the constraints to second order)
        step = np.linalg.lstsq(kkt, -r, rcond=KKT_RCOND)[0]
        dz, dlam = step[: len(z)], step[len(z) :]
        alpha = 1.0
        accepted = False
        while alpha > 1e-10:
            zt = z + alpha * dz
            if problem.admissible(zt):
                lt = lam + alpha * dlam
                rt, nt = kkt_residual(zt, lt)
                if nt < (1 - 1e-4 * alpha) * norm or (alpha == 1.0 and nt < 10 * norm and stalled < 3):
                    accepted = True
                    break
            alpha *= 0.5
        if not accepted:
            break
        stalled = stalled + 1 if nt >= norm else 0
        z, lam, r, norm = zt, lt, rt, nt
        # near the rounding floor the residual only jitters; stop once it has
        # not halved for several iterations
        if norm < 0.5 * best:
            best, since_best = norm, 0
        else:
            since_best += 1
            if since_best >= 5:
                break
    return z, lam, it, norm <= tol, norm


def _extragradient(
    problem: SaddleProblem,
    z0: np.ndarray,
    ball: DualBall,
    max_iter: int,
    tol: float,
    history: list[float],
    rng: np.random.Generator,
) -> tuple[np.ndarray, float, np.ndarray, int]:
    """Projected extragradient on the reduced problem with backtracking."""
    z = np.array(z0, dtype=float)
    c = np.zeros(ball.size)
    best_val, best_c = sup_objective(problem, z, ball, 8, rng)
    best_z = z.copy()
    eta = 1e-2

    active = np.asarray(problem.newton_indices)

    def primal_grad(z: np.ndarray, c: np.ndarray) -> np.ndarray:
        grad, _ = problem.base_derivatives(z)
        jac = problem.constraint_jacobian(z)
        return grad - jac.T @ c[active]

    def dual_grad(z: np.ndarray) -> np.ndarray:
        out = np.zeros(ball.size)
        out[active] = -problem.constraints(z)
        return out

    it = 0
    for it in range(1, max_iter + 1):
        while True:
            zh = z - eta * primal_grad(z, c)
            ch = project_dual(c + eta * dual_grad(z), ball)
            if problem.admissible(zh):
                zn = z - eta * primal_grad(zh, ch)
                cn = project_dual(c + eta * dual_grad(zh), ball)
                if problem.admissible(zn):
                    break
            eta *= 0.5
            if eta < 1e-14:
                return best_z, best_val, best_c, it
        z, c = zn, cn
        if it % 10 == 0:
            val, cc = sup_objective(problem, z, ball, 8, rng)
            if val < best_val:
                best_val, best_c, best_z = val, cc, z.copy()
            history.append(best_val)
            if best_val <= tol:
                break
            eta *= 1.1
    return best_z, best_val, best_c, it


def solve_saddle(
    problem: SaddleProblem,
    init: np.ndarray,
    ball: DualBall,
    tol: float = 1e-8,
    max_iter: int = 100_000,
    newton_tol: float = 1e-11,
    seed: int = 0,
) -> SaddleResult:
    """Minimize ``sup_{c in ball} F(z|c)`` over reduced coordinates ``z``.

    The Newton phase solves the stationarity system of ``min base`` subject to
    ``g = 0`` on the bounded directions.  When the resulting multipliers lie
    in the ball this point minimizes the sup-functional; otherwise a projected
    extragradient iteration continues from it.  Either way the returned gap is
    the a-posteriori supremum over the ball.
    """
    rng = np.random.default_rng(seed)
    init = np.asarray(init, dtype=float)
    if not math.isfinite(problem.base(init)):
        raise DomainError("step objective is infinite at the initial point")
    history: list[float] = []
    z, lam, iters, ok, kkt = _lagrange_newton(problem, init, min(max_iter, 200), newton_tol)
    multipliers = np.zeros(ball.size)
    multipliers[problem.newton_indices] = lam
    coeffs_in_ball = ball.weight(multipliers) <= ball.limit * (1 + 1e-12)
    value, cert = sup_objective(problem, z, ball, 64, rng)
    history.append(value)
    method = "lagrange-newton"
    # the sampled sup certifies the point on its own, so a Newton run that
    # stalled at rounding level still counts when the certificate holds
    if not (coeffs_in_ball and value <= tol):
        z2, v2, c2, it2 = _extragradient(problem, z if ok else init, ball, max_iter, tol, history, rng)
        iters += it2
        if v2 < value:
            z, value, cert, method = z2, v2, c2, "extragradient"
    best = []
    for v in history:
        best.append(v if not best else min(best[-1], v))
    return SaddleResult(
        primal=z,
        gap_estimate=value,
        certifying_coeffs=cert,
        iterations=iters,
        converged=value <= tol,
        method=method,
        history=best,
        diagnostics={"kkt_residual": kkt, "newton_converged": ok, "multipliers_in_ball": bool(coeffs_in_ball)},
    )


class QuadraticSaddle:
    """Problem ``base(z) - c . (A z - b)`` with a quadratic base.

    Useful for closed-form checks.
    """

    def __init__(
        self,
        hess: np.ndarray,
        lin: np.ndarray,
        const: float,
        a: np.ndarray,
        b: np.ndarray,
    ) -> None:
        self.hess = np.atleast_2d(np.asarray(hess, float))
        self.lin = np.asarray(lin, float)
        self.const = float(const)
        self.a = np.atleast_2d(np.asarray(a, float))
        self.b = np.asarray(b, float)
        self.dim = self.hess.shape[0]
        self.newton_indices = np.arange(len(self.b))

    def base(self, z: np.ndarray) -> float:
        return 0.5 * z @ self.hess @ z + self.lin @ z + self.const

    def base_derivatives(self, z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return self.hess @ z + self.lin, self.hess

    def linear_part(self, z: np.ndarray) -> np.ndarray:
        return self.a @ z - self.b

    def constraints(self, z: np.ndarray) -> np.ndarray:
        return self.linear_part(z)

    def constraint_jacobian(self, z: np.ndarray) -> np.ndarray:
        return self.a

    def constraint_curvature(self, z: np.ndarray, lam: np.ndarray) -> np.ndarray:
        return np.zeros((self.dim, self.dim))

    def admissible(self, z: np.ndarray) -> bool:
        return bool(np.all(np.isfinite(z)))
