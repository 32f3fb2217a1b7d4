import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from envar import euler_korteweg as ek
from envar.core import ContractViolation, DomainError
from envar.saddle import DualBall, PolyhedralWeight, QuadraticSaddle, project_dual, solve_saddle, sup_objective
from envar.stepper import StepFunctional, build_model

coeffs3 = arrays(float, 3, elements=st.floats(-5.0, 5.0, allow_nan=False))
MAX_ABS = PolyhedralWeight(((1.0, np.vstack([np.eye(2), -np.eye(2)])),))


def max_abs_ball(limit, null=()):
    return DualBall(np.eye(2), limit, MAX_ABS, null)


def rows_weight(seed=0):
    rng = np.random.default_rng(seed)
    return PolyhedralWeight(((2.0, rng.standard_normal((6, 3))), (0.5, rng.standard_normal((4, 3)))))


@given(coeffs3, st.floats(0.0, 10.0))
def test_polyhedral_weight_is_positively_homogeneous(c, s):
    w = rows_weight()
    assert w(s * c) == pytest.approx(s * w(c), rel=1e-12, abs=1e-12)
    assert w(c) >= 0


@given(coeffs3, coeffs3, st.floats(0.0, 1.0))
def test_polyhedral_weight_is_convex(a, b, lam):
    w = rows_weight()
    assert w(lam * a + (1 - lam) * b) <= lam * w(a) + (1 - lam) * w(b) + 1e-10


def test_project_dual_keeps_interior_points():
    ball = max_abs_ball(2.0)
    c = np.array([1.0, -1.5])
    np.testing.assert_array_equal(project_dual(c, ball), c)


def test_project_dual_scales_to_the_boundary():
    ball = max_abs_ball(2.0)
    out = project_dual(np.array([4.0, -1.0]), ball)
    np.testing.assert_allclose(out, [2.0, -0.5])
    assert ball.weight(out) == pytest.approx(2.0)


def test_project_dual_leaves_null_components():
    weight = PolyhedralWeight(((1.0, np.array([[1.0, 0.0], [-1.0, 0.0]])),))
    ball = DualBall(np.eye(2), 1.0, weight, (1,))
    np.testing.assert_allclose(project_dual(np.array([3.0, 7.0]), ball), [1.0, 7.0])


def test_project_dual_rejects_negative_weight():
    ball = DualBall(np.eye(2), 1.0, lambda c: -1.0)
    with pytest.raises(ContractViolation):
        project_dual(np.ones(2), ball)


def test_bilinear_problem_has_saddle_at_origin():
    problem = QuadraticSaddle(np.zeros((2, 2)), np.zeros(2), 0.0, np.eye(2), np.zeros(2))
    res = solve_saddle(problem, np.array([0.7, -0.2]), max_abs_ball(3.0), tol=1e-10)
    np.testing.assert_allclose(res.primal, 0.0, atol=1e-12)
    assert res.converged and res.gap_estimate <= 1e-10


def test_quadratic_problem_reaches_its_minimizer():
    a = np.array([0.3, -1.2])
    problem = QuadraticSaddle(np.eye(2), -a, 0.5 * a @ a, np.eye(2), a)
    res = solve_saddle(problem, np.zeros(2), max_abs_ball(1.0), tol=1e-10)
    np.testing.assert_allclose(res.primal, a, atol=1e-12)
    assert res.gap_estimate <= 1e-10
    assert res.method == "lagrange-newton"


def test_nonvanishing_null_component_gives_infinite_sup():
    problem = QuadraticSaddle(np.eye(2), np.zeros(2), 0.0, np.eye(2), np.zeros(2))
    value, coeffs = sup_objective(problem, np.array([0.0, 0.5]), max_abs_ball(1.0, null=(1,)))
    assert value == math.inf
    assert coeffs[1] != 0


def test_zero_radius_ball_returns_the_base():
    problem = QuadraticSaddle(np.eye(2), np.zeros(2), 1.0, np.eye(2), np.zeros(2))
    z = np.array([1.0, 2.0])
    value, coeffs = sup_objective(problem, z, max_abs_ball(0.0))
    assert value == pytest.approx(problem.base(z))
    np.testing.assert_array_equal(coeffs, 0.0)


def test_exact_sup_matches_vertex_enumeration():
    rng = np.random.default_rng(0)
    rows = rng.standard_normal((12, 2))
    w = PolyhedralWeight(((1.0, rows),))
    ball = DualBall(np.eye(2), 2.0, w)
    problem = QuadraticSaddle(np.eye(2), np.zeros(2), 0.0, rng.standard_normal((2, 2)), rng.standard_normal(2))
    z = np.array([0.4, -0.3])
    value, coeffs = sup_objective(problem, z, ball, n_samples=0)
    # the ball is the polygon {rows @ c <= limit}; its optimum sits at a vertex
    best = -math.inf
    for i in range(len(rows)):
        for j in range(i + 1, len(rows)):
            m = rows[[i, j]]
            if abs(np.linalg.det(m)) < 1e-12:
                continue
            c = np.linalg.solve(m, [ball.limit, ball.limit])
            if np.all(rows @ c <= ball.limit * (1 + 1e-12)):
                best = max(best, float(-problem.linear_part(z) @ c))
    assert value == pytest.approx(problem.base(z) + best, rel=1e-9)
    assert w(coeffs) <= ball.limit * (1 + 1e-9)


def test_infinite_initial_point_is_refused():
    class Wall(QuadraticSaddle):
        def base(self, z):
            return math.inf

    problem = Wall(np.eye(1), np.zeros(1), 0.0, np.eye(1), np.zeros(1))
    with pytest.raises(DomainError):
        solve_saddle(problem, np.zeros(1), DualBall(np.eye(1), 1.0, lambda c: abs(float(c[0]))))


def test_euler_korteweg_constant_state_is_its_own_step(ek_grid):
    u0, rho_bar = ek.initial_state(ek_grid, np.full(ek_grid.n_nodes, 0.8))
    system = ek.make_system(ek_grid, 2.0, rho_bar)
    tau = 1e-2
    ball = system.dual_ball(tau)
    model = build_model(StepFunctional(system, u0, tau), ball)
    res = solve_saddle(model, model.coords(u0), ball)
    assert res.gap_estimate <= 1e-10
    np.testing.assert_allclose(model.state(res.primal), u0, atol=1e-12)


def test_history_is_monotone(ek_setup):
    system, u0 = ek_setup
    ball = system.dual_ball(1e-2)
    model = build_model(StepFunctional(system, u0, 1e-2), ball)
    res = solve_saddle(model, model.coords(u0), ball)
    assert all(b <= a for a, b in zip(res.history, res.history[1:]))
