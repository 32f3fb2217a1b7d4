import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy.integrate import quad

from envar import euler_korteweg as ek
from envar.stepper import StepFunctional


def cosine_state(grid, amp=0.5, gamma=2.0):
    rho = 1.0 + amp * np.cos(math.pi * grid.x)
    return ek.EKState(rho, np.zeros_like(rho), gamma, 1.0)


def mode_test(n_modes, mode, scale, grid):
    a = np.zeros(n_modes)
    a[mode - 1] = scale
    return ek.EKTestFunction(np.zeros(grid.n_nodes), a)


@pytest.mark.parametrize(
    "rho,m,expected",
    [(1.0, 0.0, 1.0), (2.0, 2.0, 5.0), (0.0, 0.0, 0.0), (0.0, 1.0, math.inf), (-1.0, 0.0, math.inf)],
)
def test_pointwise_energy_density(rho, m, expected):
    assert ek.ek_eta(rho, m, 2.0) == expected


def test_constant_state_energies(ek_grid):
    ones = np.ones(ek_grid.n_nodes)
    assert ek.ek_energy(ek_grid, ek.EKState(ones, 0 * ones, 2.0, 1.0)) == pytest.approx(1.0, abs=1e-14)
    assert ek.ek_energy(ek_grid, ek.EKState(ones, ones, 2.0, 1.0)) == pytest.approx(1.5, abs=1e-14)


def test_negative_node_gives_infinite_energy(ek_grid):
    rho = np.ones(ek_grid.n_nodes)
    rho[7] = -1e-9
    assert ek.ek_energy(ek_grid, ek.EKState(rho, 0 * rho, 2.0, 1.0)) == math.inf


def test_energy_of_cosine_density_converges_at_second_order():
    exact = 9 / 8 + math.pi**2 / 16
    errors = []
    for n in (33, 65, 129, 257):
        grid = ek.Grid1D(1.0, n)
        errors.append(abs(ek.ek_energy(grid, cosine_state(grid)) - exact))
    rates = [math.log2(a / b) for a, b in zip(errors, errors[1:])]
    assert min(rates) > 1.9
    assert errors[-1] < 1e-4


def test_mass_of_cosine_density(ek_grid):
    assert ek.mass(ek_grid, cosine_state(ek_grid)) == pytest.approx(1.0, abs=1e-14)


def continuum_operator(rho, drho, m, dm, dpsi, dphi, ddphi, gamma):
    def integrand(x):
        r, rp, mm = rho(x), drho(x), m(x)
        return (-mm * dpsi(x) - (mm * mm / r + r**gamma) * dphi(x)
                - r * rp * ddphi(x) - 1.5 * rp * rp * dphi(x))

    return quad(integrand, 0.0, 1.0, epsabs=1e-13, epsrel=1e-12, limit=200)[0]


def test_operator_converges_to_the_continuum_pairing():
    pi = math.pi
    exact = continuum_operator(
        lambda x: 1 + 0.2 * math.cos(pi * x), lambda x: -0.2 * pi * math.sin(pi * x),
        lambda x: 0.3 * math.sin(pi * x), None,
        lambda x: -pi * math.sin(2 * pi * x), lambda x: pi * math.cos(pi * x) + 2 * pi * 0.5 * math.cos(2 * pi * x),
        lambda x: -pi**2 * math.sin(pi * x) - (2 * pi) ** 2 * 0.5 * math.sin(2 * pi * x), 2.0,
    )
    errors = []
    for n in (33, 65, 129, 257):
        grid = ek.Grid1D(1.0, n)
        x = grid.x
        state = ek.EKState(1 + 0.2 * np.cos(pi * x), 0.3 * np.sin(pi * x), 2.0, 1.0)
        testfn = ek.EKTestFunction(0.5 * np.cos(2 * pi * x), np.array([1.0, 0.5, 0.0]))
        errors.append(abs(ek.ek_operator(grid, state, testfn) - exact))
    rates = [math.log2(a / b) for a, b in zip(errors, errors[1:])]
    assert min(rates) > 1.8
    assert errors[-1] < 1e-4


def test_operator_covector_matches_direct_evaluation(ek_setup):
    system, u0 = ek_setup
    disc = system.params["disc"]
    rng = np.random.default_rng(0)
    for u in ek.random_states(disc, 5, rng):
        v = rng.standard_normal(system.test_dim)
        direct = ek.ek_operator(disc.grid, disc.state(u), disc.testfn(v))
        assert disc.operator(0.0, u, v) == pytest.approx(direct, rel=1e-11, abs=1e-11)


def test_pairing_is_the_weighted_nodal_sum(ek_setup):
    system, _ = ek_setup
    disc = system.params["disc"]
    grid = disc.grid
    rng = np.random.default_rng(1)
    u, v = rng.standard_normal(system.state_dim), rng.standard_normal(system.test_dim)
    phi = disc.testfn(v).phi(grid.x, grid.length)
    direct = grid.integrate(u[: disc.n] * v[: disc.n] + u[disc.n :] * phi)
    assert system.pairing(u, v) == pytest.approx(direct, rel=1e-12)


@pytest.mark.parametrize("s", [0.3, -0.7, 1.0])
def test_weights_for_a_single_sine_mode(s):
    grid = ek.Grid1D(1.0, 65)
    testfn = mode_test(4, 2, s, grid)
    c_p = ek.poincare_constant(grid)
    k = 2 * math.pi * abs(s)
    assert ek.ek_K(grid, testfn, 2.0) == pytest.approx(3 * k, rel=1e-12)
    assert ek.ek_Ktilde(grid, testfn, 2.0) == pytest.approx(5 * k + 2 * c_p * (2 * math.pi) ** 2 * abs(s), rel=1e-12)


@given(arrays(float, 6, elements=st.floats(-2.0, 2.0)), st.floats(1.2, 4.0))
def test_auxiliary_weight_dominates(a, gamma):
    grid = ek.Grid1D(1.0, 33)
    testfn = ek.EKTestFunction(np.zeros(33), a)
    assert ek.ek_K(grid, testfn, gamma) <= ek.ek_Ktilde(grid, testfn, gamma) + 1e-12


def test_poincare_constant_approaches_one_over_pi():
    assert ek.poincare_constant(ek.Grid1D(1.0, 128)) == pytest.approx(1 / math.pi, rel=0.01)
    assert ek.poincare_constant(ek.Grid1D(2.0, 128)) == pytest.approx(2 / math.pi, rel=0.01)


@given(arrays(float, 40, elements=st.floats(-1.0, 1.0)))
def test_poincare_inequality_on_mean_free_vectors(h):
    grid = ek.Grid1D(1.0, 40)
    h = h - grid.integrate(h) / grid.length
    lhs = math.sqrt(grid.integrate(h * h))
    rhs = ek.poincare_constant(grid) * math.sqrt(h @ grid.stiffness @ h)
    assert lhs <= rhs * (1 + 1e-10) + 1e-14


def test_obstacle_with_large_constant_source(ek_grid):
    sol = ek.solve_obstacle(ek_grid, np.full(ek_grid.n_nodes, 2.0), 2.0)
    np.testing.assert_allclose(sol.rho, 1.0, atol=1e-12)
    np.testing.assert_allclose(sol.lam, 0.0, atol=1e-12)


def test_obstacle_with_negative_source(ek_grid):
    sol = ek.solve_obstacle(ek_grid, np.full(ek_grid.n_nodes, -1.0), 2.0)
    np.testing.assert_array_equal(sol.rho, 0.0)
    np.testing.assert_allclose(sol.lam, -1.0, atol=1e-12)


def assert_obstacle_optimality(grid, g, gamma):
    sol = ek.solve_obstacle(grid, g, gamma)
    assert np.min(sol.rho) >= -1e-12
    assert np.max(sol.lam) <= 1e-10
    assert np.max(np.abs(sol.lam * sol.rho)) <= 1e-10
    assert np.max(np.abs(ek.obstacle_residual(grid, sol.rho, sol.lam, g, gamma))) <= 1e-10
    return sol


def test_obstacle_with_sign_changing_source(ek_grid):
    g = 3.0 * np.cos(2 * math.pi * ek_grid.x)
    sol = assert_obstacle_optimality(ek_grid, g, 2.0)
    assert np.any(sol.rho == 0.0) and np.any(sol.rho > 0.1)


@given(arrays(float, 6, elements=st.floats(-3.0, 3.0)), st.sampled_from([1.2, 1.5, 2.0, 3.0, 4.0]))
def test_obstacle_optimality_for_random_sources(coeffs, gamma):
    grid = ek.Grid1D(1.0, 33)
    g = np.cos(np.outer(grid.x, np.arange(6)) * math.pi) @ coeffs
    assert_obstacle_optimality(grid, g, gamma)


def test_obstacle_with_density_touching_zero_at_low_exponent():
    # the exact density is of rounding size at the last node, where the
    # pressure slope is unbounded for exponents below two
    grid = ek.Grid1D(1.0, 9)
    g = np.cos(np.outer(grid.x, np.arange(6)) * math.pi).sum(axis=1)
    sol = assert_obstacle_optimality(grid, g, 1.2)
    assert sol.rho[-1] < 1e-12


def test_dual_subdifferential_of_zero_is_the_mean_density(ek_grid):
    zero = ek.EKTestFunction(np.zeros(ek_grid.n_nodes), np.zeros(4))
    sub = ek.dual_subdifferential(ek_grid, zero, 2.0, 1.3)
    np.testing.assert_allclose(sub.state.rho, 1.3, atol=1e-10)
    np.testing.assert_array_equal(sub.state.m, 0.0)


def test_dual_subdifferential_keeps_mass_and_momentum(ek_grid):
    testfn = ek.EKTestFunction.from_modes(ek_grid, np.array([0.2, -0.1]), np.array([0.1, 0.05]))
    sub = ek.dual_subdifferential(ek_grid, testfn, 2.0, 1.0)
    assert sub.mean_error <= 1e-12
    zeta = testfn.phi(ek_grid.x, ek_grid.length)
    np.testing.assert_array_equal(sub.state.m, sub.state.rho * zeta)


def test_energy_balance_vanishes_without_momentum_test(ek_grid):
    testfn = ek.EKTestFunction.from_modes(ek_grid, np.array([0.3, 0.1]), np.zeros(4))
    assert abs(ek.energy_balance_check(ek_grid, testfn, 2.0, 1.0)) <= 1e-14


def test_growth_bound_on_random_states(ek_setup):
    system, _ = ek_setup
    disc = system.params["disc"]
    c = ek.growth_constant(2.0)
    for u in ek.random_states(disc, 50, np.random.default_rng(2)):
        state = disc.state(u)
        assert ek.ek_energy(disc.grid, state) >= c * ek.growth_terms(disc.grid, state)


def test_convexity_probe_with_auxiliary_weight(ek_setup):
    system, _ = ek_setup
    disc = system.params["disc"]
    for a in ek.shipped_phi():
        v = np.concatenate([np.zeros(disc.n), a])
        assert ek.ek_convexity_probe(system, v, 200, True).worst_violation <= 1e-9


def test_convexity_probe_without_test_function(ek_setup):
    system, _ = ek_setup
    probe = ek.ek_convexity_probe(system, np.zeros(system.test_dim), 100, False)
    assert probe.weight_value == 0.0
    assert probe.worst_violation <= 1e-12


def test_test_paths_stay_inside_the_step_ball(ek_setup, ek_family):
    system, _ = ek_setup
    tau = 0.25 / 32
    for path in ek_family:
        for t in np.linspace(0.0, 0.25, 33):
            assert system.reg_weight_aux(path(t)) <= 0.5 / tau * (1 + 1e-9)


@pytest.fixture(scope="module")
def small_model():
    grid = ek.Grid1D(1.0, 12)
    rho = 1.0 + 0.2 * np.cos(math.pi * grid.x)
    m = 0.1 * np.sin(math.pi * grid.x)
    u0, rho_bar = ek.initial_state(grid, rho, m)
    system = ek.make_system(grid, 2.0, rho_bar, 4)
    ball = system.dual_ball(0.01)
    model = system.step_model(StepFunctional(system, u0, 0.01), ball)
    z = model.coords(u0) + 0.05 * np.random.default_rng(0).standard_normal(model.dim)
    return model, z


def central_jacobian(func, z, h=1e-6):
    cols = []
    for i in range(len(z)):
        e = np.zeros(len(z))
        e[i] = h
        cols.append((np.asarray(func(z + e)) - np.asarray(func(z - e))) / (2 * h))
    return np.array(cols).T


def test_step_model_base_derivatives(small_model):
    model, z = small_model
    grad, hess = model.base_derivatives(z)
    np.testing.assert_allclose(grad, central_jacobian(model.base, z), atol=1e-7)
    np.testing.assert_allclose(hess, central_jacobian(lambda x: model.base_derivatives(x)[0], z), atol=1e-6)


def test_step_model_constraint_derivatives(small_model):
    model, z = small_model
    np.testing.assert_allclose(model.constraint_jacobian(z), central_jacobian(model.constraints, z), atol=1e-7)
    lam = np.array([0.5, -1.0, 0.25, 2.0])
    curvature = central_jacobian(lambda x: model.constraint_jacobian(x).T @ lam, z)
    np.testing.assert_allclose(model.constraint_curvature(z, lam), curvature, atol=1e-6)


def test_step_model_density_rows_vanish(small_model):
    model, z = small_model
    g = model.linear_part(z)
    assert np.max(np.abs(g[: model.disc.n])) <= 1e-14
