"""One-dimensional Euler-Korteweg system on ``[0, L]``.

Nodes are equidistant; pairings and nodal integrals use the trapezoid
weights, the capillary energy uses cell differences, and operator terms that
involve derivatives of the state live on cell midpoints.  Momentum test
fields are sine modes ``sin(k pi x / L)`` with analytic derivatives; density
test functions are arbitrary nodal vectors.

State vectors are ``(h, m)`` with ``h = rho - rho_bar``; test vectors are
``(psi, a)`` with ``psi`` nodal and ``a`` the sine coefficients of ``phi``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy.linalg import eigh, null_space
from scipy.optimize import brentq

from .core import INF, DomainError, SystemDescription, TestPath
from .saddle import DualBall, PolyhedralWeight

OVERSAMPLE = 8


@dataclass(frozen=True)
class Grid1D:
    length: float
    n_nodes: int

    def __post_init__(self) -> None:
        if self.length <= 0 or self.n_nodes < 8:
            raise ValueError("need length > 0 and at least 8 nodes")

    @property
    def spacing(self) -> float:
        return self.length / (self.n_nodes - 1)

    @cached_property
    def x(self) -> np.ndarray:
        return np.linspace(0.0, self.length, self.n_nodes)

    @cached_property
    def midpoints(self) -> np.ndarray:
        return 0.5 * (self.x[1:] + self.x[:-1])

    @cached_property
    def weights(self) -> np.ndarray:
        w = np.full(self.n_nodes, self.spacing)
        w[0] = w[-1] = 0.5 * self.spacing
        return w

    @cached_property
    def diff(self) -> np.ndarray:
        """Cell difference matrix, ``(D u)_c = u_{c+1} - u_c``."""
        n = self.n_nodes
        d = np.zeros((n - 1, n))
        idx = np.arange(n - 1)
        d[idx, idx] = -1.0
        d[idx, idx + 1] = 1.0
        return d

    @cached_property
    def avg(self) -> np.ndarray:
        return np.abs(self.diff) * 0.5

    @cached_property
    def stiffness(self) -> np.ndarray:
        return self.diff.T @ self.diff / self.spacing

    @cached_property
    def samples(self) -> np.ndarray:
        return np.linspace(0.0, self.length, OVERSAMPLE * (self.n_nodes - 1) + 1)

    def integrate(self, values: np.ndarray) -> float:
        return float(self.weights @ values)

    def gradient(self, values: np.ndarray) -> np.ndarray:
        return self.diff @ values / self.spacing


def _sine(x: np.ndarray, n_modes: int, length: float, order: int) -> np.ndarray:
    k = np.arange(1, n_modes + 1) * math.pi / length
    arg = np.outer(x, k)
    if order == 0:
        return np.sin(arg)
    if order == 1:
        return np.cos(arg) * k
    if order == 2:
        return -np.sin(arg) * k**2
    if order == 3:
        return -np.cos(arg) * k**3
    raise ValueError(order)


def _cosine(x: np.ndarray, n_modes: int, length: float) -> np.ndarray:
    k = np.arange(1, n_modes + 1) * math.pi / length
    return np.cos(np.outer(x, k))


@dataclass(frozen=True)
class EKState:
    rho: np.ndarray
    m: np.ndarray
    gamma: float
    rho_bar: float

    @property
    def h(self) -> np.ndarray:
        return self.rho - self.rho_bar

    def vector(self) -> np.ndarray:
        return np.concatenate([self.h, self.m])

    @classmethod
    def from_vector(cls, u: np.ndarray, gamma: float, rho_bar: float) -> EKState:
        n = len(u) // 2
        return cls(rho_bar + u[:n], u[n:], gamma, rho_bar)


@dataclass(frozen=True)
class EKTestFunction:
    """Density test values ``psi`` (nodal) and sine coefficients of ``phi``."""

    psi: np.ndarray
    phi_coeffs: np.ndarray

    def vector(self) -> np.ndarray:
        return np.concatenate([self.psi, self.phi_coeffs])

    @classmethod
    def from_vector(cls, v: np.ndarray, n_nodes: int) -> EKTestFunction:
        return cls(np.asarray(v[:n_nodes], float), np.asarray(v[n_nodes:], float))

    @classmethod
    def from_modes(
        cls, grid: Grid1D, psi_cos: np.ndarray, phi_coeffs: np.ndarray
    ) -> EKTestFunction:
        """``psi = sum_j b_j cos(j pi x/L)`` (mean-free) and sine ``phi``."""
        psi_cos = np.asarray(psi_cos, float)
        psi = _cosine(grid.x, len(psi_cos), grid.length) @ psi_cos if len(psi_cos) else np.zeros(grid.n_nodes)
        return cls(psi, np.asarray(phi_coeffs, float))

    def phi(self, x: np.ndarray, length: float, order: int = 0) -> np.ndarray:
        if not len(self.phi_coeffs):
            return np.zeros_like(x)
        return _sine(x, len(self.phi_coeffs), length, order) @ self.phi_coeffs


def ek_eta(rho_val: float, m_val: float, gamma: float) -> float:
    if rho_val > 0:
        return m_val * m_val / (2 * rho_val) + rho_val**gamma / (gamma - 1)
    if rho_val == 0 and m_val == 0:
        return 0.0
    return INF


def _eta_nodes(rho: np.ndarray, m: np.ndarray, gamma: float) -> np.ndarray:
    out = np.full(rho.shape, INF)
    pos = rho > 0
    out[pos] = m[pos] ** 2 / (2 * rho[pos]) + rho[pos] ** gamma / (gamma - 1)
    out[(rho == 0) & (m == 0)] = 0.0
    return out


def ek_energy(grid: Grid1D, state: EKState) -> float:
    eta = _eta_nodes(state.rho, state.m, state.gamma)
    if not np.all(np.isfinite(eta)):
        return INF
    grad = grid.gradient(state.rho)
    return grid.integrate(eta) + 0.5 * grid.spacing * float(grad @ grad)


def mass(grid: Grid1D, state: EKState) -> float:
    return grid.integrate(state.rho)


def poincare_constant(grid: Grid1D) -> float:
    """Best constant in ``|h|_W <= c |h'|`` over discrete mean-free ``h``."""
    vals = eigh(grid.stiffness, np.diag(grid.weights), eigvals_only=True, subset_by_index=[0, 1])
    return 1.0 / math.sqrt(vals[1])


def _flux(rho: np.ndarray, m: np.ndarray, gamma: float) -> np.ndarray:
    out = np.zeros_like(rho)
    pos = rho > 0
    out[pos] = m[pos] ** 2 / rho[pos] + rho[pos] ** gamma
    bad = (~pos) & (m != 0)
    if np.any(bad):
        raise DomainError("momentum flux undefined where density vanishes and momentum does not")
    return out


def ek_operator(grid: Grid1D, state: EKState, testfn: EKTestFunction) -> float:
    """Pairing of the operator with ``(psi, phi)``.

    Cell-midpoint quadrature of
    ``-m psi' - (m^2/rho + rho^gamma) phi' - rho rho' phi'' - 3/2 rho'^2 phi'``
    with nodal fluxes averaged to cells and the nodal difference of ``psi``.
    """
    dx = grid.spacing
    rho, m = state.rho, state.m
    flux = grid.avg @ _flux(rho, m, state.gamma)
    rho_mid = grid.avg @ rho
    drho = grid.gradient(rho)
    d1 = testfn.phi(grid.midpoints, grid.length, 1)
    d2 = testfn.phi(grid.midpoints, grid.length, 2)
    psi_part = -float((grid.avg @ m) @ (grid.diff @ testfn.psi))
    phi_part = dx * float(np.sum(-flux * d1 - rho_mid * drho * d2 - 1.5 * drho**2 * d1))
    return psi_part + phi_part


def _sup_norms(grid: Grid1D, testfn: EKTestFunction) -> tuple[float, float]:
    d1 = testfn.phi(grid.samples, grid.length, 1)
    d2 = testfn.phi(grid.samples, grid.length, 2)
    neg = max(0.0, float(np.max(-d1))) if d1.size else 0.0
    return neg, float(np.max(np.abs(d2))) if d2.size else 0.0


def ek_K(grid: Grid1D, testfn: EKTestFunction, gamma: float) -> float:
    neg, _ = _sup_norms(grid, testfn)
    return (2.0 + max(gamma - 1.0, 1.0)) * neg


def ek_Ktilde(grid: Grid1D, testfn: EKTestFunction, gamma: float, c_p: float | None = None) -> float:
    c_p = poincare_constant(grid) if c_p is None else c_p
    neg, curv = _sup_norms(grid, testfn)
    return (2.0 + max(gamma - 1.0, 3.0)) * neg + 2.0 * c_p * curv


def growth_constant(gamma: float) -> float:
    """Constant ``c`` in ``E >= c (|m|^q_q + |rho|^gamma_gamma + |rho'|^2)``, ``q = 2 gamma/(gamma+1)``."""
    return 1.0 / max(2.0, (gamma + 2.0) * (gamma - 1.0) / (gamma + 1.0))


def growth_terms(grid: Grid1D, state: EKState) -> float:
    q = 2 * state.gamma / (state.gamma + 1)
    grad = grid.gradient(state.rho)
    return (
        grid.integrate(np.abs(state.m) ** q)
        + grid.integrate(np.abs(state.rho) ** state.gamma)
        + grid.spacing * float(grad @ grad)
    )


@dataclass
class ObstacleSolution:
    rho: np.ndarray
    lam: np.ndarray
    epsilon_final: float
    residual_norm: float
    newton_iterations: int = 0
    active_set_rounds: int = 0


def _q(rho: np.ndarray, gamma: float) -> np.ndarray:
    return gamma / (gamma - 1) * np.maximum(rho, 0.0) ** (gamma - 1)


def _dq(rho: np.ndarray, gamma: float) -> np.ndarray:
    pos = np.maximum(rho, 0.0)
    if gamma >= 2:
        return gamma * pos ** (gamma - 2)
    return gamma * np.maximum(pos, 1e-12) ** (gamma - 2)


def obstacle_residual(grid: Grid1D, rho: np.ndarray, lam: np.ndarray, g: np.ndarray, gamma: float) -> np.ndarray:
    """Nodal strong-form residual ``W^{-1} K rho + q(rho) + lam - g``."""
    return grid.stiffness @ rho / grid.weights + _q(rho, gamma) + lam - g


def solve_obstacle(
    grid: Grid1D,
    g: np.ndarray,
    gamma: float,
    tol: float = 1e-10,
    schedule: tuple[float, ...] = (1e-2, 1e-4, 1e-6, 1e-8, 1e-10),
    max_newton: int = 100,
) -> ObstacleSolution:
    """Density-constrained semilinear Neumann problem.

    Damped Newton along a decreasing Yosida schedule, followed by a
    primal-dual active-set pass that makes complementarity exact.
    """
    g = np.asarray(g, dtype=float)
    w, k = grid.weights, grid.stiffness
    rho = np.maximum((gamma - 1) / gamma * np.maximum(g, 0.0), 0.0) ** (1.0 / (gamma - 1))
    total_iter = 0

    def yosida(rho: np.ndarray, eps: float) -> np.ndarray:
        return k @ rho + w * (_q(rho, gamma) + np.minimum(rho, 0.0) / eps - g)

    for eps in schedule:
        r = yosida(rho, eps)
        for _ in range(max_newton):
            norm = np.max(np.abs(r / w))
            if norm <= 1e-13 * max(1.0, np.max(np.abs(g))):
                break
            # at the kink take the penalized branch so the Jacobian stays regular
            jac = k + np.diag(w * (_dq(rho, gamma) + (rho <= 0) / eps))
            step = np.linalg.solve(jac, -r)
            t = 1.0
            while t > 1e-8:
                trial = rho + t * step
                rt = yosida(trial, eps)
                if np.max(np.abs(rt / w)) < norm:
                    break
                t *= 0.5
            else:
                break  # no decrease left: the residual sits at rounding level
            rho, r = trial, rt
            total_iter += 1
    eps_final = schedule[-1]

    # For exponents below two the pressure has unbounded slope at zero, so the
    # active-set Newton runs in s = rho^(gamma-1), where the pressure is
    # linear and rho(s) is continuously differentiable.
    power = 1.0 / (gamma - 1) if gamma < 2 else 1.0
    const = gamma / (gamma - 1)

    def to_rho(s: np.ndarray) -> np.ndarray:
        return np.sign(s) * np.abs(s) ** power

    def pressure_slope(s: np.ndarray) -> np.ndarray:
        if gamma < 2:
            return const * (s >= 0)
        return _dq(s, gamma)

    active = rho < 0
    rounds = 0
    lam = np.zeros_like(rho)
    s = np.sign(rho) * np.abs(rho) ** (1.0 / power)
    for rounds in range(1, 60):
        free = ~active
        s = np.where(active, 0.0, s)

        def free_residual(s: np.ndarray) -> tuple[np.ndarray, float]:
            rho = to_rho(s)
            r = (k @ rho + w * (_q(rho, gamma) - g))[free]
            return r, float(np.max(np.abs(r / w[free]), initial=0.0))

        r, norm = free_residual(s)
        for _ in range(max_newton):
            if norm <= 1e-14 * max(1.0, np.max(np.abs(g))):
                break
            drho = power * np.abs(s) ** (power - 1)
            jac = k[np.ix_(free, free)] * drho[free] + np.diag((w * pressure_slope(s))[free])
            step = np.linalg.solve(jac, -r)
            t = 1.0
            while t > 1e-12:
                trial = s.copy()
                trial[free] += t * step
                rt, nt = free_residual(trial)
                if nt < norm:
                    break
                t *= 0.5
            else:
                break  # no decrease left: the residual sits at rounding level
            s, r, norm = trial, rt, nt
            total_iter += 1
        rho = to_rho(s)
        lam = np.where(active, g - _q(rho, gamma) - (k @ rho) / w, 0.0)
        new_active = lam + rho < 0
        if np.array_equal(new_active, active):
            break
        active = new_active
    res = float(np.max(np.abs(obstacle_residual(grid, rho, lam, g, gamma))))
    sol = ObstacleSolution(rho, lam, eps_final, res, total_iter, rounds)
    if res > tol:
        raise RuntimeError(f"obstacle solve stagnated with residual {res:.3e}")
    return sol


def weighted_norm(grid: Grid1D, values: np.ndarray, p: float) -> float:
    return grid.integrate(np.abs(values) ** p) ** (1.0 / p)


@dataclass
class SubdifferentialResult:
    state: EKState
    obstacle: ObstacleSolution
    shift: float
    mean_error: float


def dual_subdifferential(
    grid: Grid1D, testfn: EKTestFunction, gamma: float, rho_bar: float
) -> SubdifferentialResult:
    """State whose energy derivative is ``(psi, phi)`` up to an additive constant.

    The constant shift of the obstacle right-hand side is found by a
    bracketed root search so that the mean density equals ``rho_bar``.
    """
    zeta = testfn.phi(grid.x, grid.length)
    base = testfn.psi + 0.5 * zeta**2

    def mean_excess(shift: float) -> float:
        return mass(grid, EKState(solve_obstacle(grid, base + shift, gamma).rho, 0 * zeta, gamma, rho_bar)) / grid.length - rho_bar

    lo = -float(np.max(base)) - 1.0
    hi = gamma / (gamma - 1) * rho_bar ** (gamma - 1) - float(np.min(base)) + 1.0
    shift = brentq(mean_excess, lo, hi, xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=200)
    sol = solve_obstacle(grid, base + shift, gamma)
    state = EKState(sol.rho, sol.rho * zeta, gamma, rho_bar)
    err = abs(mass(grid, state) / grid.length - rho_bar)
    return SubdifferentialResult(state, sol, shift, err)


def energy_balance_check(grid: Grid1D, testfn: EKTestFunction, gamma: float, rho_bar: float) -> float:
    sub = dual_subdifferential(grid, testfn, gamma, rho_bar)
    return ek_operator(grid, sub.state, testfn)


class EKDiscretization:
    """Precomputed matrices for one grid, exponent and mean density."""

    def __init__(self, grid: Grid1D, gamma: float, rho_bar: float, n_modes: int = 16) -> None:
        if gamma <= 1:
            raise ValueError("gamma must exceed 1")
        self.grid, self.gamma, self.rho_bar, self.n_modes = grid, gamma, rho_bar, n_modes
        n = grid.n_nodes
        self.n = n
        self.c_p = poincare_constant(grid)
        self.s0 = _sine(grid.x, n_modes, grid.length, 0)
        self.c1 = _sine(grid.midpoints, n_modes, grid.length, 1)
        self.c2 = _sine(grid.midpoints, n_modes, grid.length, 2)
        self.sample1 = _sine(grid.samples, n_modes, grid.length, 1)
        self.sample2 = _sine(grid.samples, n_modes, grid.length, 2)
        dx = grid.spacing
        self.flux_weights = dx * grid.avg.T @ self.c1
        self.curv_weights = grid.diff.T @ self.c2
        self.ktilde_coef = (2.0 + max(gamma - 1.0, 3.0), 2.0 * self.c_p)
        self.k_coef = 2.0 + max(gamma - 1.0, 1.0)

    # state and test vector helpers
    def split(self, u: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return self.rho_bar + u[: self.n], u[self.n :]

    def state(self, u: np.ndarray) -> EKState:
        return EKState.from_vector(u, self.gamma, self.rho_bar)

    def testfn(self, v: np.ndarray) -> EKTestFunction:
        return EKTestFunction.from_vector(v, self.n)

    def energy(self, u: np.ndarray) -> float:
        return ek_energy(self.grid, self.state(u))

    def pairing(self, u: np.ndarray, v: np.ndarray) -> float:
        return float(self.pairing_covector(u) @ v)

    def pairing_covector(self, u: np.ndarray) -> np.ndarray:
        w = self.grid.weights
        h, m = u[: self.n], u[self.n :]
        return np.concatenate([w * h, self.s0.T @ (w * m)])

    def operator_covector(self, u: np.ndarray) -> np.ndarray:
        """Vector ``c`` with ``<A(U), Phi> = c . Phi`` for all test vectors."""
        rho, m = self.split(u)
        grid = self.grid
        flux = _flux(rho, m, self.gamma)
        drho = grid.diff @ rho
        psi_part = -grid.diff.T @ (grid.avg @ m)
        phi_part = (
            -flux @ self.flux_weights
            - 0.5 * (rho**2) @ self.curv_weights
            - (1.5 / grid.spacing) * (drho**2) @ self.c1
        )
        return np.concatenate([psi_part, phi_part])

    def operator(self, t: float, u: np.ndarray, v: np.ndarray) -> float:
        return float(self.operator_covector(u) @ v)

    def weight_rows(self) -> tuple[np.ndarray, np.ndarray]:
        zeros1 = np.zeros((self.sample1.shape[0], self.n))
        neg = np.hstack([zeros1, -self.sample1])
        curv = np.hstack([zeros1, self.sample2])
        return neg, np.vstack([curv, -curv])

    def reg_weight(self, v: np.ndarray) -> float:
        a = v[self.n :]
        neg = max(0.0, float(np.max(-(self.sample1 @ a))))
        return self.k_coef * neg

    def reg_weight_aux(self, v: np.ndarray) -> float:
        a = v[self.n :]
        neg = max(0.0, float(np.max(-(self.sample1 @ a))))
        curv = float(np.max(np.abs(self.sample2 @ a)))
        return self.ktilde_coef[0] * neg + self.ktilde_coef[1] * curv

    def test_norm(self, v: np.ndarray) -> float:
        psi, a = v[: self.n], v[self.n :]
        s0 = _sine(self.grid.samples, self.n_modes, self.grid.length, 0)
        parts = [
            np.max(np.abs(psi)),
            np.max(np.abs(self.grid.gradient(psi))),
            np.max(np.abs(s0 @ a)),
            np.max(np.abs(self.sample1 @ a)),
            np.max(np.abs(self.sample2 @ a)),
        ]
        return float(max(parts))

    def state_norm(self, u: np.ndarray) -> float:
        return self.grid.integrate(np.abs(u[: self.n]) + np.abs(u[self.n :]))

    def dual_norm(self, v: np.ndarray) -> float:
        return float(max(np.max(np.abs(v[: self.n])), np.max(np.abs(self.s0 @ v[self.n :]))))

    def coercivity(self) -> tuple[float, float]:
        c = self.gamma - 1 + max(1.0, 0.5 * (self.gamma - 1))
        return 1.0 / c, (1.5 + self.rho_bar) * self.grid.length / c

    def lower_bound_const(self, radius: float) -> float:
        lin = self.rho_bar + max(1.0, 0.5 * (self.gamma - 1))
        return radius * max(lin, 0.5 * (self.rho_bar + 1) * self.grid.length)

    def dual_ball(self, tau: float) -> DualBall:
        neg, curv = self.weight_rows()
        weight = PolyhedralWeight(((self.ktilde_coef[0], neg), (self.ktilde_coef[1], curv)))
        size = self.n + self.n_modes
        return DualBall(np.eye(size), 1.0 / tau, weight, tuple(range(self.n)))

    # derivatives with respect to nodal (rho, m)
    def energy_derivatives(self, rho: np.ndarray, m: np.ndarray):
        g, w, grid = self.gamma, self.grid.weights, self.grid
        e_r = -(m**2) / (2 * rho**2) + g / (g - 1) * rho ** (g - 1)
        e_m = m / rho
        e_rr = m**2 / rho**3 + g * rho ** (g - 2)
        e_rm = -m / rho**2
        e_mm = 1 / rho
        grad_r = w * e_r + grid.stiffness @ rho
        grad_m = w * e_m
        h_rr = np.diag(w * e_rr) + grid.stiffness
        return grad_r, grad_m, h_rr, w * e_rm, w * e_mm

    def operator_mode_derivatives(self, rho: np.ndarray, m: np.ndarray):
        """Gradients of ``<A, phi_k>`` for every sine mode, shape ``(n, K)``."""
        g, grid = self.gamma, self.grid
        p_r = -(m**2) / rho**2 + g * rho ** (g - 1)
        p_m = 2 * m / rho
        drho = grid.diff @ rho
        d_r = (
            -self.flux_weights * p_r[:, None]
            - rho[:, None] * self.curv_weights
            - (3.0 / grid.spacing) * grid.diff.T @ (self.c1 * drho[:, None])
        )
        d_m = -self.flux_weights * p_m[:, None]
        return d_r, d_m

    def operator_curvature(self, rho: np.ndarray, m: np.ndarray, lam: np.ndarray):
        """Hessian blocks of ``<A, sum_k lam_k phi_k>`` in ``(rho, m)``."""
        g, grid = self.gamma, self.grid
        a = self.flux_weights @ lam
        b = self.curv_weights @ lam
        c1 = self.c1 @ lam
        p_rr = 2 * m**2 / rho**3 + g * (g - 1) * rho ** (g - 2)
        p_rm = -2 * m / rho**2
        p_mm = 2 / rho
        h_rr = np.diag(-a * p_rr - b) - (3.0 / grid.spacing) * grid.diff.T @ (c1[:, None] * grid.diff)
        return h_rr, -a * p_rm, -a * p_mm


class EKStepModel:
    """Reduced step problem in the interior momenta.

    Density follows from the discrete continuity equation, which makes every
    density-test component of the step functional vanish identically.
    """

    def __init__(self, disc: EKDiscretization, step, ball: DualBall) -> None:
        self.disc, self.step, self.ball = disc, step, ball
        grid = disc.grid
        n = disc.n
        self.tau = step.tau
        self.h_prev = step.prev_state[:n].copy()
        self.m_prev = step.prev_state[n:].copy()
        self.prev_energy = step.prev_energy
        embed = np.zeros((n, n - 2))
        embed[np.arange(1, n - 1), np.arange(n - 2)] = 1.0
        self.embed = embed
        self.transport = grid.diff.T @ grid.avg
        self.b_h = self.tau * (self.transport / grid.weights[:, None]) @ embed
        self.dim = n - 2
        self.newton_indices = np.arange(n, n + disc.n_modes)

    def state(self, z: np.ndarray) -> np.ndarray:
        m = self.embed @ z
        h = self.h_prev + self.b_h @ z
        return np.concatenate([h, m])

    def coords(self, u: np.ndarray) -> np.ndarray:
        return np.asarray(u[self.disc.n + 1 : 2 * self.disc.n - 1], float)

    def _rho_m(self, z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return self.disc.split(self.state(z))

    def admissible(self, z: np.ndarray) -> bool:
        rho, _ = self._rho_m(z)
        return bool(np.all(rho > 0) and np.all(np.isfinite(z)))

    def base(self, z: np.ndarray) -> float:
        e = self.disc.energy(self.state(z))
        return e - self.prev_energy if math.isfinite(e) else INF

    def base_derivatives(self, z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        rho, m = self._rho_m(z)
        g_r, g_m, h_rr, h_rm, h_mm = self.disc.energy_derivatives(rho, m)
        return self._chain(g_r, g_m, h_rr, h_rm, h_mm)

    def _chain(self, g_r, g_m, h_rr, h_rm, h_mm):
        b, e = self.b_h, self.embed
        grad = b.T @ g_r + e.T @ g_m
        cross = b.T @ (h_rm[:, None] * e)
        hess = b.T @ h_rr @ b + cross + cross.T + e.T @ (h_mm[:, None] * e)
        return grad, hess

    def constraints(self, z: np.ndarray) -> np.ndarray:
        u = self.state(z)
        m = u[self.disc.n :]
        pair = self.disc.s0.T @ (self.disc.grid.weights * (m - self.m_prev))
        return pair + self.tau * self.disc.operator_covector(u)[self.disc.n :]

    def constraint_jacobian(self, z: np.ndarray) -> np.ndarray:
        rho, m = self._rho_m(z)
        d_r, d_m = self.disc.operator_mode_derivatives(rho, m)
        pair = (self.disc.grid.weights[:, None] * self.disc.s0).T @ self.embed
        return pair + self.tau * (d_r.T @ self.b_h + d_m.T @ self.embed)

    def constraint_curvature(self, z: np.ndarray, lam: np.ndarray) -> np.ndarray:
        rho, m = self._rho_m(z)
        h_rr, h_rm, h_mm = self.disc.operator_curvature(rho, m, lam)
        zero = np.zeros_like(rho)
        _, hess = self._chain(zero, zero, h_rr, h_rm, h_mm)
        return self.tau * hess

    def linear_part(self, z: np.ndarray) -> np.ndarray:
        u = self.state(z)
        n = self.disc.n
        delta = u.copy()
        delta[:n] -= self.h_prev
        delta[n:] -= self.m_prev
        return self.disc.pairing_covector(delta) + self.tau * self.disc.operator_covector(u)


def make_system(
    grid: Grid1D, gamma: float = 2.0, rho_bar: float = 1.0, n_modes: int = 16
) -> SystemDescription:
    disc = EKDiscretization(grid, gamma, rho_bar, n_modes)
    return SystemDescription(
        name="euler_korteweg_1d",
        state_dim=2 * grid.n_nodes,
        test_dim=grid.n_nodes + n_modes,
        energy=disc.energy,
        dissipation=lambda t, u: 0.0,
        operator=disc.operator,
        reg_weight=disc.reg_weight,
        reg_weight_aux=disc.reg_weight_aux,
        coercivity=disc.coercivity(),
        lower_bound_const=disc.lower_bound_const,
        pairing=disc.pairing,
        state_norm=disc.state_norm,
        test_norm=disc.test_norm,
        dual_norm=disc.dual_norm,
        autonomous=True,
        dual_ball=disc.dual_ball,
        step_model=lambda step, ball: EKStepModel(disc, step, ball),
        params={"disc": disc, "gamma": gamma, "rho_bar": rho_bar, "length": grid.length, "n_nodes": grid.n_nodes},
    )


def initial_state(grid: Grid1D, rho: np.ndarray, m: np.ndarray | None = None) -> tuple[np.ndarray, float]:
    """State vector and mean density for nodal ``rho`` and ``m``."""
    rho = np.asarray(rho, float)
    m = np.zeros_like(rho) if m is None else np.asarray(m, float).copy()
    m[0] = m[-1] = 0.0
    rho_bar = grid.integrate(rho) / grid.length
    return np.concatenate([rho - rho_bar, m]), rho_bar


def test_paths(system: SystemDescription, horizon: float, tau: float, count: int = 16, seed: int = 0,
               fill: float = 0.5) -> list[TestPath]:
    """Smooth time-dependent test paths kept inside the step dual ball.

    Each path combines one dominant sine mode of the momentum test field with
    a cosine density test function; amplitudes are scaled so that the
    auxiliary weight stays below ``fill / tau`` on ``[0, horizon]``.
    """
    disc: EKDiscretization = system.params["disc"]
    rng = np.random.default_rng(seed)
    paths = []
    times = np.linspace(0.0, horizon, 257)
    for j in range(count):
        a = np.zeros(disc.n_modes)
        a[j % disc.n_modes] = 1.0
        a += 0.1 * rng.standard_normal(disc.n_modes) / (1 + np.arange(disc.n_modes)) ** 2
        b = np.zeros(4)
        b[j % 4] = rng.uniform(0.5, 1.0)
        psi_dir = EKTestFunction.from_modes(disc.grid, b, np.zeros(disc.n_modes)).vector()
        phi_dir = np.concatenate([np.zeros(disc.n), a])
        offset = rng.uniform(0.3, 1.0, size=2) * rng.choice([-1.0, 1.0], size=2)
        slope = rng.uniform(-1.0, 1.0, size=2) / max(horizon, 1e-12)
        amp = rng.uniform(0.0, 0.5, size=2)
        freq = 2 * math.pi * rng.integers(1, 4) / max(horizon, 1e-12)
        path = TestPath(f"ek-{j}", np.vstack([psi_dir, phi_dir]), offset, slope, amp, freq, rng.uniform(0, 2 * math.pi))
        peak = max(system.reg_weight_aux(path(t)) for t in times)
        if peak > 0:
            path = path.scaled(fill / (tau * peak))
        paths.append(path)
    return paths


def shipped_phi(n_modes: int = 16) -> list[np.ndarray]:
    """Sine coefficient vectors used by the probes (pure modes 1-3 and a mix)."""
    out = []
    for k in (1, 2, 3):
        a = np.zeros(n_modes)
        a[k - 1] = 1.0
        out.append(a)
    mix = np.zeros(n_modes)
    mix[:3] = [0.6, -0.3, 0.2]
    out.append(mix)
    return out


def shipped_pairs(grid: Grid1D, n_modes: int = 16) -> list[EKTestFunction]:
    """Five smooth low-mode ``(psi, phi)`` pairs for the energy-balance study."""
    specs = [
        ([0.1], [0.1]),
        ([0.0, 0.1], [0.05, 0.05]),
        ([0.05, -0.05, 0.02], [0.0, 0.1]),
        ([-0.1], [0.08, 0.0, 0.03]),
        ([0.03, 0.03], [-0.1, 0.02]),
    ]
    out = []
    for psi_cos, phi in specs:
        a = np.zeros(n_modes)
        a[: len(phi)] = phi
        out.append(EKTestFunction.from_modes(grid, np.array(psi_cos), a))
    return out


@dataclass
class ConvexityProbe:
    worst_violation: float
    witness: tuple[np.ndarray, np.ndarray] | None = None
    weight_value: float = 0.0
    samples: int = 0
    min_curvature: float = field(default=math.nan)


def _probe_function(disc: EKDiscretization, v: np.ndarray, weight: float):
    cov_t = v

    def f(u: np.ndarray) -> float:
        e = disc.energy(u)
        if not math.isfinite(e):
            return INF
        return -float(disc.operator_covector(u) @ cov_t) + weight * e

    return f


def random_states(disc: EKDiscretization, count: int, rng: np.random.Generator, amp: float = 0.5) -> list[np.ndarray]:
    """Finite-energy states with mean-free density perturbations."""
    grid = disc.grid
    out = []
    modes = _cosine(grid.x, 6, grid.length)
    for _ in range(count):
        h = modes @ (rng.standard_normal(6) / (1 + np.arange(6)))
        h += 0.05 * rng.standard_normal(grid.n_nodes)
        h -= grid.integrate(h) / grid.length
        scale = amp * disc.rho_bar / max(np.max(np.abs(h)), 1e-12) * rng.uniform(0.1, 1.0)
        h *= min(1.0, scale)
        m = rng.standard_normal(grid.n_nodes) * rng.uniform(0.01, 1.0)
        m[0] = m[-1] = 0.0
        out.append(np.concatenate([h, m]))
    return out


def ek_convexity_probe(
    system: SystemDescription,
    testfn: np.ndarray,
    n_samples: int = 1000,
    use_aux: bool = True,
    seed: int = 0,
) -> ConvexityProbe:
    """Midpoint convexity of ``U -> -<A(U),Phi> + weight(Phi) E(U)``.

    With ``use_aux=False`` the regularity weight replaces the auxiliary one,
    and an additional targeted search along the most negative curvature
    direction of the density block is run to produce a witness.
    """
    disc: EKDiscretization = system.params["disc"]
    v = np.asarray(testfn, float)
    weight = disc.reg_weight_aux(v) if use_aux else disc.reg_weight(v)
    f = _probe_function(disc, v, weight)
    rng = np.random.default_rng(seed)
    states = random_states(disc, 2 * n_samples, rng)
    worst, witness = -INF, None
    for a, b in zip(states[::2], states[1::2]):
        fa, fb, fm = f(a), f(b), f(0.5 * (a + b))
        viol = fm - 0.5 * (fa + fb)
        if viol > worst:
            worst, witness = viol, (a, b)
    probe = ConvexityProbe(worst, witness if worst > 0 else None, weight, n_samples)
    # second variation of the density block at the constant state
    n = disc.n
    rho = np.full(n, disc.rho_bar)
    m = np.zeros(n)
    _, _, e_rr, _, _ = disc.energy_derivatives(rho, m)
    a_rr, _, _ = disc.operator_curvature(rho, m, v[n:])
    hess = weight * e_rr - a_rr
    w = disc.grid.weights
    basis = null_space(w[None, :])
    curv, vecs = eigh(basis.T @ hess @ basis, basis.T @ (w[:, None] * basis))
    probe.min_curvature = float(curv[0])
    if curv[0] < 0:
        direction = basis @ vecs[:, 0]
        direction /= np.max(np.abs(direction))
        centre = np.zeros(2 * n)
        for eps in (0.5, 0.2, 0.1, 0.05, 0.02, 0.01):
            step = np.concatenate([eps * disc.rho_bar * direction, np.zeros(n)])
            a, b = centre + step, centre - step
            viol = f(centre) - 0.5 * (f(a) + f(b))
            if viol > probe.worst_violation:
                probe.worst_violation = viol
                probe.witness = (a, b)
    return probe
