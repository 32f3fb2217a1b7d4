"""Checks of the energy-variational inequality on discrete trajectories.

For a trajectory ``(U, E)`` on a time grid and a test path ``Phi`` the
residual over ``[t_i, t_j]`` is

    [E - <U, Phi>]_{t_i}^{t_j}
      + int_{t_i}^{t_j} <U, dPhi/dt> + Psi(U) - <A(U), Phi> + K(Phi)(energy(U) - E)

with the time integral replaced by a quadrature on the grid.  Non-positive
values (up to a tolerance) mean the inequality holds for that triple.  The
residual is affine in the nodal values of ``E``, which the minimal-defect
reconstruction exploits.

Quadrature modes:

``prolongation``
    piecewise-constant states ``U(t) = U_n`` on ``(t_{n-1}, t_n]`` with the
    test function frozen at the left end of each interval, except in the
    ``dPhi/dt`` term which is integrated exactly.  On minimizing-movements
    output with ``E = energy(U)`` the residual is the sum of the per-step
    functionals ``F_n(U_n | Phi(t_{n-1}))``.
``trapezoid``
    trapezoid rule for the integrand sampled at the grid nodes.
``left``
    left-endpoint rule for the same integrand.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.optimize import linprog

from .core import INF, ContractViolation, SystemDescription, TestPath, Trajectory, energy
from .stepper import average_dissipation, average_in_time

MODES = ("prolongation", "trapezoid", "left")
MAX_PAIRS = 10_000


class InadmissibleTest(ContractViolation):
    """A test path violates the admissibility constraint of its system."""


@dataclass
class ResidualReport:
    entries: list[tuple[str, float, float, float]]
    max_residual: float
    passed: bool
    tolerance: float
    mode: str = "prolongation"

    def to_dict(self) -> dict:
        return {
            "entries": [list(e) for e in self.entries],
            "max_residual": self.max_residual,
            "pass": self.passed,
            "tolerance": self.tolerance,
            "mode": self.mode,
        }


@dataclass
class DefectCurve:
    times: np.ndarray
    values: np.ndarray
    feasible: bool
    objective: float = math.nan
    energies: np.ndarray = field(default_factory=lambda: np.zeros(0))
    certificate: dict = field(default_factory=dict)
    label: str = "linear-programming reconstruction"

    @property
    def defect(self) -> np.ndarray:
        return self.values - self.energies

    def to_dict(self) -> dict:
        return {
            "label": self.label,
            "times": list(map(float, self.times)),
            "values": list(map(float, self.values)),
            "feasible": self.feasible,
            "objective": self.objective,
            "certificate": self.certificate,
        }


def check_path(system: SystemDescription, path: TestPath, times: np.ndarray) -> None:
    """Reject paths with the wrong dimension or violating the system's constraint."""
    if path.directions.shape[1] != system.test_dim:
        raise InadmissibleTest(f"path {path.name}: test dimension {path.directions.shape[1]} != {system.test_dim}")
    check = system.params.get("test_admissible")
    for t in times:
        value = path(float(t))
        if not np.all(np.isfinite(value)):
            raise InadmissibleTest(f"path {path.name}: non-finite test vector at t={t}")
        if check is not None:
            ok, reason = check(value)
            if not ok:
                raise InadmissibleTest(f"path {path.name} at t={t}: {reason}")


class PathTable:
    """Per-node quantities of one path along one trajectory.

    ``residual(E, i, j)`` costs O(1) after an O(N) prefix sum, and the
    coefficients of ``E`` are available in closed form.
    """

    def __init__(self, system: SystemDescription, traj: Trajectory, path: TestPath, mode: str = "prolongation"):
        if mode not in MODES:
            raise ValueError(f"unknown quadrature mode {mode!r}")
        self.mode = mode
        self.name = path.name
        t = traj.times
        u = traj.states
        n = len(t)
        self.times = t
        self.tau = np.diff(t)
        phi = [path(float(s)) for s in t]
        self.energies = np.array([energy(system, x) for x in u])
        self.pair = np.array([system.pairing(u[k], phi[k]) for k in range(n)])
        if mode == "prolongation":
            # quantities attached to interval k (from t[k-1] to t[k]), index 1..N
            self.fixed = np.zeros(n)
            self.weight = np.zeros(n)
            for k in range(1, n):
                tk = self.tau[k - 1]
                lo, hi = float(t[k - 1]), float(t[k])
                self.fixed[k] = (
                    system.pairing(u[k], phi[k] - phi[k - 1])
                    + tk * average_dissipation(system, lo, hi, u[k])
                    - tk * average_in_time(system, lo, hi, u[k], phi[k - 1])
                )
                self.weight[k] = tk * system.reg_weight(phi[k - 1])
        else:
            # integrand at nodes split into E-independent part and K weight
            node_fixed = np.array([
                system.pairing(u[k], path.time_derivative(float(t[k])))
                + system.dissipation(float(t[k]), u[k])
                - system.operator(float(t[k]), u[k], phi[k])
                for k in range(n)
            ])
            node_weight = np.array([system.reg_weight(phi[k]) for k in range(n)])
            self.node_fixed, self.node_weight = node_fixed, node_weight

    def step_terms(self, aux: np.ndarray) -> np.ndarray:
        """Contribution of each interval ``k = 1..N`` (index 0 unused)."""
        gap = self.energies - aux
        out = np.zeros(len(self.times))
        if self.mode == "prolongation":
            out[1:] = self.fixed[1:] + self.weight[1:] * gap[1:]
            return out
        integrand = self.node_fixed + self.node_weight * gap
        if self.mode == "trapezoid":
            out[1:] = 0.5 * self.tau * (integrand[:-1] + integrand[1:])
        else:
            out[1:] = self.tau * integrand[:-1]
        return out

    def prefix(self, aux: np.ndarray) -> np.ndarray:
        return np.cumsum(self.step_terms(aux))

    def residual(self, aux: np.ndarray, i: int, j: int, prefix: np.ndarray | None = None) -> float:
        prefix = self.prefix(aux) if prefix is None else prefix
        return float(aux[j] - aux[i] - self.pair[j] + self.pair[i] + prefix[j] - prefix[i])

    def coefficients(self, i: int, j: int) -> np.ndarray:
        """Gradient of ``residual`` with respect to the nodal values of ``E``."""
        c = np.zeros(len(self.times))
        c[j] += 1.0
        c[i] -= 1.0
        if self.mode == "prolongation":
            c[i + 1 : j + 1] -= self.weight[i + 1 : j + 1]
        elif self.mode == "trapezoid":
            half = 0.5 * self.tau[i:j]
            c[i:j] -= half * self.node_weight[i:j]
            c[i + 1 : j + 1] -= half * self.node_weight[i + 1 : j + 1]
        else:
            c[i:j] -= self.tau[i:j] * self.node_weight[i:j]
        return c


def residual(
    system: SystemDescription,
    traj: Trajectory,
    path: TestPath,
    s: float,
    t: float,
    mode: str = "prolongation",
) -> float:
    i, j = traj.index_of(s), traj.index_of(t)
    if not i < j:
        raise ValueError("need s < t")
    return PathTable(system, traj, path, mode).residual(traj.aux_energy, i, j)


def default_pairs(n_nodes: int, cap: int = MAX_PAIRS, seed: int = 0) -> list[tuple[int, int]]:
    """All index pairs ``i < j``; above ``cap`` a stratified sample by gap length."""
    pairs = [(i, j) for i in range(n_nodes) for j in range(i + 1, n_nodes)]
    if len(pairs) <= cap:
        return pairs
    rng = np.random.default_rng(seed)
    by_gap: dict[int, list[tuple[int, int]]] = {}
    for p in pairs:
        by_gap.setdefault(p[1] - p[0], []).append(p)
    chosen: list[tuple[int, int]] = []
    total = len(pairs)
    for gap in sorted(by_gap):
        group = by_gap[gap]
        k = max(1, int(round(cap * len(group) / total)))
        idx = rng.choice(len(group), size=min(k, len(group)), replace=False)
        chosen.extend(group[q] for q in sorted(idx))
    return sorted(chosen)[:cap] if len(chosen) > cap else sorted(chosen)


def verify(
    system: SystemDescription,
    traj: Trajectory,
    family: Sequence[TestPath],
    pairs: Iterable[tuple[int, int]] | None = None,
    tol: float = 1e-6,
    mode: str = "prolongation",
    seed: int = 0,
) -> ResidualReport:
    """Residuals over the cross product of paths and index pairs."""
    pairs = default_pairs(len(traj), seed=seed) if pairs is None else list(pairs)
    for i, j in pairs:
        if not 0 <= i < j < len(traj):
            raise ValueError(f"invalid index pair {(i, j)}")
    entries = []
    worst = -INF
    for path in family:
        check_path(system, path, traj.times)
        table = PathTable(system, traj, path, mode)
        prefix = table.prefix(traj.aux_energy)
        for i, j in pairs:
            r = table.residual(traj.aux_energy, i, j, prefix)
            entries.append((path.name, float(traj.times[i]), float(traj.times[j]), r))
            worst = max(worst, r)
    return ResidualReport(entries, worst, bool(worst <= tol), tol, mode)


@dataclass
class AprioriReport:
    bound: float
    rate: float
    sup_energy: float
    total_variation: float
    sup_state_norm: float
    state_norm_bound: float
    dissipation_integral: float
    monotone: bool
    checks: dict[str, bool]
    margin: float

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def apriori_check(
    system: SystemDescription, traj: Trajectory, bound_initial: float, step_tol: float = 0.0
) -> AprioriReport:
    """Bounds implied by the inequality with ``Phi = 0`` and the coercivity.

    The constant follows a Gronwall argument with rate
    ``K(0) + c(0) + Ktilde(0)``; for rate zero it reduces to ``E(t) <= M``.
    ``M`` bounds the energy right after the initial time, so the energy check
    runs over the positive grid times.  ``step_tol`` is the per-step
    certification tolerance; ``N`` steps may raise the energy by ``N step_tol``.
    """
    zero = np.zeros(system.test_dim)
    c0 = system.lower_bound_const(0.0)
    rate = system.reg_weight(zero) + c0 + system.reg_weight_aux(zero)
    horizon = float(traj.times[-1] - traj.times[0])
    growth = math.exp(rate * horizon)
    bound = (bound_initial + c0 * horizon) * growth + (growth - 1.0) + (len(traj) - 1) * step_tol
    aux = traj.aux_energy
    later = aux[1:] if len(aux) > 1 else aux
    tv = float(np.sum(np.abs(np.diff(aux))))
    tv_bound = bound_initial + 2.0 * rate * horizon * (bound + 1.0) + 2.0 * (len(traj) - 1) * step_tol
    alpha, beta = system.coercivity
    norms = np.array([system.state_norm(u) for u in traj.states])
    norm_bound = (bound + beta) / alpha
    diss = [system.dissipation(float(t), u) for t, u in zip(traj.times, traj.states)]
    diss_int = float(np.sum(0.5 * np.diff(traj.times) * (np.abs(diss[:-1]) + np.abs(diss[1:])))) if len(diss) > 1 else 0.0
    diss_bound = bound + rate * horizon * (bound + 1.0)
    monotone = bool(np.all(np.diff(aux) <= step_tol))
    checks = {
        "energy": bool(np.max(later) <= bound),
        "total_variation": bool(tv <= tv_bound),
        "state_norm": bool(np.max(norms) <= norm_bound),
        "dissipation": bool(diss_int <= diss_bound),
    }
    if rate == 0.0:
        checks["monotone"] = monotone
    margin = min(
        bound - float(np.max(later)),
        tv_bound - tv,
        norm_bound - float(np.max(norms)),
        diss_bound - diss_int,
    )
    return AprioriReport(bound, rate, float(np.max(later)), tv, float(np.max(norms)), norm_bound, diss_int,
                         monotone, checks, margin)


def concatenate(
    system: SystemDescription,
    first: Trajectory,
    second: Trajectory,
    family: Sequence[TestPath],
    junction: float,
    tol: float = 1e-10,
) -> Trajectory:
    """Join two trajectories at ``junction``.

    The junction node keeps the state and auxiliary energy of ``first``.
    """
    if not math.isclose(first.times[-1], junction, abs_tol=1e-12) or not math.isclose(
        second.times[0], junction, abs_tol=1e-12
    ):
        raise ValueError("first must end and second must start at the junction time")
    gap = first.states[-1] - second.states[0]
    for path in family:
        mismatch = abs(system.pairing(gap, path(junction)))
        if mismatch > tol:
            raise ValueError(f"junction states differ on path {path.name} by {mismatch:.3e}")
    if second.aux_energy[0] > first.aux_energy[-1]:
        raise ValueError("auxiliary energy increases across the junction")
    times = np.concatenate([first.times, second.times[1:]])
    states = np.concatenate([first.states, second.states[1:]])
    aux = np.concatenate([first.aux_energy, second.aux_energy[1:]])
    certs = np.concatenate([first.certificates, second.certificates])
    prov = {"concatenated_at": junction, "first": first.provenance, "second": second.provenance}
    return Trajectory(times, states, aux, prov, certs)


def constraint_rows(
    system: SystemDescription,
    traj: Trajectory,
    family: Sequence[TestPath],
    pairs: Sequence[tuple[int, int]],
    mode: str = "prolongation",
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Affine form ``residual = offset + coeffs @ E`` of every constraint.

    Returns ``(coeffs, offset, energies)`` with one row per path and pair.
    """
    rows, offsets = [], []
    energies = np.array([energy(system, u) for u in traj.states])
    zero = np.zeros(len(traj))
    for path in family:
        check_path(system, path, traj.times)
        table = PathTable(system, traj, path, mode)
        prefix = table.prefix(zero)
        for i, j in pairs:
            rows.append(table.coefficients(i, j))
            offsets.append(table.residual(zero, i, j, prefix))
    if not rows:
        return np.zeros((0, len(traj))), np.zeros(0), energies
    return np.array(rows), np.array(offsets), energies


def reconstruct_min_defect(
    system: SystemDescription,
    traj: Trajectory,
    family: Sequence[TestPath],
    pairs: Sequence[tuple[int, int]] | None = None,
    tol: float | np.ndarray = 1e-8,
    mode: str = "prolongation",
) -> DefectCurve:
    """Smallest auxiliary energy curve (in the sum) making all residuals ``<= tol``.

    ``tol`` may be one value per constraint, in path-major order.
    """
    pairs = default_pairs(len(traj)) if pairs is None else list(pairs)
    coeffs, offset, energies = constraint_rows(system, traj, family, pairs, mode)
    n = len(traj)
    bounds = [(float(e), None) for e in energies]
    rhs = np.broadcast_to(np.asarray(tol, float), offset.shape) - offset
    if coeffs.shape[0] == 0:
        return DefectCurve(traj.times, energies.copy(), True, float(energies.sum()), energies)
    res = linprog(np.ones(n), A_ub=coeffs, b_ub=rhs, bounds=bounds, method="highs")
    if res.status == 0:
        values = np.maximum(res.x, energies)
        return DefectCurve(traj.times, values, True, float(values.sum()), energies,
                           {"max_constraint": float(np.max(coeffs @ values - rhs))})
    # phase one: smallest total violation, with the active multipliers as witness
    m = coeffs.shape[0]
    a_ub = np.hstack([coeffs, -np.eye(m)])
    phase = linprog(np.concatenate([np.zeros(n), np.ones(m)]), A_ub=a_ub, b_ub=rhs,
                    bounds=bounds + [(0, None)] * m, method="highs")
    cert = {"status": int(res.status), "message": res.message}
    if phase.status == 0:
        y = -phase.ineqlin.marginals
        cert.update({
            "min_total_violation": float(phase.fun),
            "multipliers": {int(k): float(y[k]) for k in np.flatnonzero(y > 1e-12)},
        })
    return DefectCurve(traj.times, np.full(n, math.nan), False, math.nan, energies, cert)


@dataclass
class Selection:
    trajectory: Trajectory
    index: int
    values: list[float]
    tied: list[int]


def select_min_functional(
    candidates: Sequence[Trajectory],
    functional: Callable[[Trajectory], float],
    system: SystemDescription | None = None,
    family: Sequence[TestPath] = (),
    tol: float = 1e-6,
) -> Selection:
    """Candidate minimizing ``functional``; ties go to the lowest index.

    When ``system`` is given every candidate is verified against ``family``
    first and failing candidates are rejected.
    """
    if not candidates:
        raise ValueError("no candidates to select from")
    if system is not None:
        for k, cand in enumerate(candidates):
            rep = verify(system, cand, family, tol=tol)
            if not rep.passed:
                raise ValueError(f"candidate {k} fails verification ({rep.max_residual:.3e})")
    values = [float(functional(c)) for c in candidates]
    if not all(math.isfinite(v) for v in values):
        raise ValueError("functional must be finite on all candidates")
    best = min(values)
    tied = [k for k, v in enumerate(values) if v == best]
    return Selection(candidates[tied[0]], tied[0], values, tied)


def integrated_aux_energy(traj: Trajectory) -> float:
    return float(np.sum(0.5 * np.diff(traj.times) * (traj.aux_energy[:-1] + traj.aux_energy[1:])))


def constant_functional(traj: Trajectory) -> float:
    return 0.0


def negative_defect_functional(system: SystemDescription) -> Callable[[Trajectory], float]:
    """``int (energy(U) - E) dt``: smallest for the largest admissible defect."""

    def functional(traj: Trajectory) -> float:
        gap = -traj.defect(system)
        return float(np.sum(0.5 * np.diff(traj.times) * (gap[:-1] + gap[1:])))

    return functional


def with_defect_profile(traj: Trajectory, profile: np.ndarray) -> Trajectory:
    """Same states with ``E = E + profile``; a non-negative non-increasing
    profile keeps every residual at most its previous value."""
    return traj.with_energy(traj.aux_energy + np.asarray(profile, float))
