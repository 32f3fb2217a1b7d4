"""System contract, trajectories and parametric test paths.

Every concrete PDE instantiation is a :class:`SystemDescription` bundling the
energy, dissipation, operator, the two regularity weights and the coercivity
constants over a fixed finite discretization.  States and test functions are
plain float vectors; ``math.inf`` is the distinguished "outside the domain"
energy value and poisons any sum it enters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import numpy as np

INF = math.inf


class ContractViolation(ValueError):
    """A system or data object broke one of its declared invariants."""


class DomainError(ValueError):
    """An operation was evaluated outside the finite-energy domain."""


@dataclass(frozen=True)
class SystemDescription:
    """Energy-variational system over finite state and test spaces.

    ``energy(U)`` may return ``INF``.  ``operator(t, U, Phi)`` is the pairing
    of the operator with a test vector, ``reg_weight``/``reg_weight_aux`` are
    the regularity weight and its larger auxiliary companion, and
    ``lower_bound_const(R)`` is a closed-form over-estimate of the constant in
    the lower-bound condition on the ball of radius ``R``.

    ``dual_ball(tau)`` builds the restricted dual search space for a step of
    size ``tau``; ``step_model(step, ball)`` returns a reduced problem for the
    saddle solver (systems without one fall back to finite differences).
    """

    name: str
    state_dim: int
    test_dim: int
    energy: Callable[[np.ndarray], float]
    dissipation: Callable[[float, np.ndarray], float]
    operator: Callable[[float, np.ndarray, np.ndarray], float]
    reg_weight: Callable[[np.ndarray], float]
    reg_weight_aux: Callable[[np.ndarray], float]
    coercivity: tuple[float, float]
    lower_bound_const: Callable[[float], float]
    pairing: Callable[[np.ndarray, np.ndarray], float]
    state_norm: Callable[[np.ndarray], float]
    test_norm: Callable[[np.ndarray], float]
    dual_norm: Callable[[np.ndarray], float]
    autonomous: bool = True
    dual_ball: Callable[[float], Any] | None = None
    step_model: Callable[[Any, Any], Any] | None = None
    params: dict[str, Any] = field(default_factory=dict)

    def check_state(self, state: np.ndarray) -> np.ndarray:
        state = np.asarray(state, dtype=float)
        if state.shape != (self.state_dim,):
            raise ContractViolation(
                f"{self.name}: state has shape {state.shape}, expected ({self.state_dim},)"
            )
        return state

    def check_test(self, testfn: np.ndarray) -> np.ndarray:
        testfn = np.asarray(testfn, dtype=float)
        if testfn.shape != (self.test_dim,):
            raise ContractViolation(
                f"{self.name}: test vector has shape {testfn.shape}, expected ({self.test_dim},)"
            )
        return testfn


def energy(system: SystemDescription, state: np.ndarray) -> float:
    value = float(system.energy(system.check_state(state)))
    if value < 0 or math.isnan(value):
        raise ContractViolation(f"{system.name}: energy returned {value}")
    return value


def dissipation(system: SystemDescription, t: float, state: np.ndarray) -> float:
    state = system.check_state(state)
    if not math.isfinite(energy(system, state)):
        raise DomainError("dissipation evaluated at an infinite-energy state")
    return float(system.dissipation(t, state))


def apply_operator(
    system: SystemDescription, t: float, state: np.ndarray, testfn: np.ndarray
) -> float:
    state = system.check_state(state)
    if not math.isfinite(energy(system, state)):
        raise DomainError("operator evaluated at an infinite-energy state")
    return float(system.operator(t, state, system.check_test(testfn)))


def fenchel_sample_check(
    system: SystemDescription, dual: np.ndarray, samples: Sequence[np.ndarray]
) -> tuple[bool, float]:
    """Check ``<U, dual> - E(U) <= beta`` over sampled states.

    Returns the verdict and the worst value of ``<U, dual> - E(U) - beta``.
    ``dual`` is a test vector measured by ``system.dual_norm`` (the norm dual
    to ``state_norm`` under the pairing); it must lie in the coercivity ball.
    """
    alpha, beta = system.coercivity
    dual = system.check_test(dual)
    if system.dual_norm(dual) > alpha * (1 + 1e-12):
        raise ContractViolation("dual vector lies outside the coercivity ball")
    worst = -INF
    for u in samples:
        e = energy(system, u)
        if not math.isfinite(e):
            continue
        worst = max(worst, float(system.pairing(u, dual)) - e - beta)
    return worst <= 0.0, worst


def lower_bound_violation(
    system: SystemDescription, t: float, state: np.ndarray, testfn: np.ndarray
) -> float:
    """Amount by which ``Psi - <A,Phi> + Ktilde E >= -c(R)(E + 1)`` fails.

    ``R`` is the test-function norm.  Non-positive means the bound holds.
    """
    e = energy(system, state)
    if not math.isfinite(e):
        return -INF
    r = system.test_norm(testfn)
    lhs = (
        dissipation(system, t, state)
        - apply_operator(system, t, state, testfn)
        + system.reg_weight_aux(testfn) * e
    )
    return -system.lower_bound_const(r) * (e + 1.0) - lhs


def midpoint_convexity_violation(
    func: Callable[[np.ndarray], float], a: np.ndarray, b: np.ndarray
) -> float:
    """``f((a+b)/2) - (f(a)+f(b))/2``; positive values witness non-convexity."""
    fa, fb = func(a), func(b)
    if not (math.isfinite(fa) and math.isfinite(fb)):
        return -INF
    return func(0.5 * (a + b)) - 0.5 * (fa + fb)


def coercivity_violation(system: SystemDescription, state: np.ndarray) -> float:
    alpha, beta = system.coercivity
    return alpha * system.state_norm(state) - beta - energy(system, state)


@dataclass(frozen=True)
class Trajectory:
    """Time-indexed states with an auxiliary energy curve.

    ``certificates`` holds the per-step certified suprema produced by the
    stepper (empty for trajectories of other origin).
    """

    times: np.ndarray
    states: np.ndarray
    aux_energy: np.ndarray
    provenance: dict[str, Any] = field(default_factory=dict)
    certificates: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self) -> None:
        times = np.asarray(self.times, dtype=float)
        states = np.asarray(self.states, dtype=float)
        aux = np.asarray(self.aux_energy, dtype=float)
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "states", states)
        object.__setattr__(self, "aux_energy", aux)
        object.__setattr__(self, "certificates", np.asarray(self.certificates, dtype=float))
        if times.ndim != 1 or len(times) == 0:
            raise ContractViolation("times must be a non-empty 1-D array")
        if np.any(np.diff(times) <= 0):
            raise ContractViolation("times must be strictly increasing")
        if states.ndim != 2 or states.shape[0] != len(times):
            raise ContractViolation("one state per time is required")
        if aux.shape != times.shape:
            raise ContractViolation("one auxiliary energy value per time is required")
        if not np.all(np.isfinite(states)):
            raise ContractViolation("states must be finite")

    def __len__(self) -> int:
        return len(self.times)

    def index_of(self, t: float) -> int:
        hits = np.flatnonzero(np.isclose(self.times, t, rtol=0.0, atol=1e-12 * max(1.0, abs(t))))
        if len(hits) != 1:
            raise ValueError(f"time {t!r} is not on the trajectory grid")
        return int(hits[0])

    def with_energy(self, aux_energy: np.ndarray) -> Trajectory:
        return Trajectory(self.times, self.states, aux_energy, dict(self.provenance), self.certificates)

    def restrict(self, i: int, j: int) -> Trajectory:
        """Sub-trajectory on grid indices ``i..j`` inclusive."""
        certs = self.certificates[i:j] if len(self.certificates) else self.certificates
        return Trajectory(
            self.times[i : j + 1],
            self.states[i : j + 1],
            self.aux_energy[i : j + 1],
            dict(self.provenance),
            certs,
        )

    def defect(self, system: SystemDescription) -> np.ndarray:
        return self.aux_energy - np.array([energy(system, u) for u in self.states])


@dataclass(frozen=True)
class TestPath:
    """A time-dependent test vector ``Phi(t) = sum_k a_k(t) d_k``.

    Each coefficient follows ``offset + slope*t + amplitude*sin(frequency*t + phase)``
    so both ``Phi`` and its time derivative are available in closed form.
    """

    __test__ = False  # not a pytest class

    name: str
    directions: np.ndarray
    offset: np.ndarray
    slope: np.ndarray | None = None
    amplitude: np.ndarray | None = None
    frequency: float = 0.0
    phase: float = 0.0

    def __post_init__(self) -> None:
        d = np.atleast_2d(np.asarray(self.directions, dtype=float))
        k = d.shape[0]
        object.__setattr__(self, "directions", d)
        object.__setattr__(self, "offset", np.broadcast_to(np.asarray(self.offset, float), (k,)).copy())
        for name in ("slope", "amplitude"):
            value = getattr(self, name)
            value = np.zeros(k) if value is None else np.broadcast_to(np.asarray(value, float), (k,)).copy()
            object.__setattr__(self, name, value)

    def coefficients(self, t: float) -> np.ndarray:
        return self.offset + self.slope * t + self.amplitude * math.sin(self.frequency * t + self.phase)

    def coefficient_rates(self, t: float) -> np.ndarray:
        return self.slope + self.amplitude * self.frequency * math.cos(self.frequency * t + self.phase)

    def __call__(self, t: float) -> np.ndarray:
        return self.coefficients(t) @ self.directions

    def time_derivative(self, t: float) -> np.ndarray:
        return self.coefficient_rates(t) @ self.directions

    def scaled(self, s: float) -> TestPath:
        return TestPath(
            self.name,
            self.directions,
            s * self.offset,
            s * self.slope,
            s * self.amplitude,
            self.frequency,
            self.phase,
        )

    @property
    def is_static(self) -> bool:
        return not np.any(self.slope) and not (np.any(self.amplitude) and self.frequency != 0.0)
