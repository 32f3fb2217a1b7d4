import numpy as np
import pytest

from envar import binormal as bn
from envar import euler_korteweg as ek
from envar.core import DomainError, energy
from envar.stepper import SolverConfig, StepFailure, StepFunctional, advance, average_in_time, run
from toy_systems import rotation_system


@pytest.mark.parametrize("lo,hi", [(0.0, 1.0), (0.3, 0.45), (2.0, 5.0)])
def test_time_average_is_exact_for_low_degree(lo, hi):
    linear = rotation_system(autonomous=False, operator=lambda t, u, v: 3.0 * t)
    quadratic = rotation_system(autonomous=False, operator=lambda t, u, v: t * t)
    u, v = np.zeros(2), np.zeros(2)
    assert average_in_time(linear, lo, hi, u, v) == pytest.approx(1.5 * (lo + hi), rel=1e-14)
    assert average_in_time(quadratic, lo, hi, u, v) == pytest.approx((hi**3 - lo**3) / (3 * (hi - lo)), rel=1e-13)


def test_time_average_needs_an_interval():
    with pytest.raises(ValueError):
        average_in_time(rotation_system(), 1.0, 1.0, np.zeros(2), np.zeros(2))


def test_step_functional_value_combines_base_and_pairings():
    system = rotation_system()
    prev = np.array([1.0, 0.0])
    step = StepFunctional(system, prev, 0.1)
    u, v = np.array([0.9, 0.2]), np.array([0.3, -0.4])
    expected = 0.5 * u @ u - 0.5 - (u - prev) @ v - 0.1 * (-(np.array([-0.2, 0.9]) @ v))
    assert step.value(u, v) == pytest.approx(expected, rel=1e-14)


def test_difference_model_reproduces_implicit_euler():
    system = rotation_system()
    prev = np.array([1.0, 0.5])
    tau = 0.2
    state, cert = advance(system, prev, tau)
    expected = np.linalg.solve(np.eye(2) - tau * np.array([[0.0, -1.0], [1.0, 0.0]]), prev)
    np.testing.assert_allclose(state, expected, atol=1e-9)
    assert energy(system, state) == pytest.approx(energy(system, prev) / (1 + tau**2), rel=1e-8)
    assert cert["sup"] <= 1e-8


def test_step_failure_reports_the_index():
    system = rotation_system()
    with pytest.raises(StepFailure) as info:
        advance(system, np.array([1.0, 0.0]), 0.1, SolverConfig(tol=-1.0, max_iter=5), index=7)
    assert info.value.index == 7
    assert info.value.diagnostics["sup"] > -1.0


def test_step_count_guard():
    system = rotation_system(aux_at_zero=5.0)
    with pytest.raises(ValueError):
        run(system, np.array([1.0, 0.0]), 1.0, 5)
    with pytest.raises(ValueError):
        advance(system, np.array([1.0, 0.0]), 0.2)
    traj = run(system, np.array([1.0, 0.0]), 1.0, 6)
    assert len(traj) == 7


def test_single_step_run_has_two_frames():
    traj = run(rotation_system(), np.array([0.0, 2.0]), 0.5, 1)
    assert len(traj) == 2
    assert traj.times[-1] == 0.5
    assert len(traj.certificates) == 1


def test_restart_times_snap_to_the_grid():
    traj = run(rotation_system(), np.array([0.0, 2.0]), 1.0, 10, restart_times=[0.31, 0.7])
    assert traj.provenance["restart_indices"] == [3, 7]


def test_euler_korteweg_step_decreases_energy_and_keeps_mass(ek_setup):
    system, u0 = ek_setup
    disc = system.params["disc"]
    state, cert = advance(system, u0, 1.0 / 128)
    assert cert["sup"] <= 1e-8
    assert energy(system, state) <= energy(system, u0) + 1e-8
    assert ek.mass(disc.grid, disc.state(state)) == pytest.approx(ek.mass(disc.grid, disc.state(u0)), abs=1e-12)


def test_euler_korteweg_run_is_monotone(ek_run):
    assert np.all(np.diff(ek_run.aux_energy) <= 1e-8)
    assert np.max(ek_run.certificates) <= 1e-8
    assert ek_run.provenance["n_steps"] == 32
    assert ek_run.times[-1] == 0.25


def test_binormal_steps_conserve_null_field_pairings(bn_system, bn_run):
    data = bn_system.params["data"]
    null = bn_system.params["basis"].null
    pairs = np.array([data.field_values(u)[0][null] for u in bn_run.states])
    assert np.max(np.abs(pairs - pairs[0])) <= 1e-10
    assert np.max(bn_run.certificates) <= 1e-8


def test_binormal_step_moves_the_circle_along_its_axis(bn_run):
    heights = [float(np.mean(u.reshape(-1, 3)[:, 2])) for u in bn_run.states]
    # the polygon travels with speed close to one over its radius
    speed = (heights[-1] - heights[0]) / bn_run.times[-1]
    assert 0.8 < speed < 1.2
    areas = np.array([bn.vector_area(u) for u in bn_run.states])
    assert np.max(np.abs(areas - areas[0])) <= 1e-10


def test_run_refuses_infinite_initial_energy(ek_setup):
    system, u0 = ek_setup
    bad = u0.copy()
    bad[0] = -2.0
    with pytest.raises(DomainError):
        run(system, bad, 0.1, 4)
