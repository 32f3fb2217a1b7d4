import math
import sys

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from envar import binormal as bn
from envar import euler_korteweg as ek
from envar.core import TestPath, Trajectory
from envar.stepper import SolverConfig, run
from envar.verify import (
    MODES,
    InadmissibleTest,
    PathTable,
    apriori_check,
    concatenate,
    constant_functional,
    constraint_rows,
    default_pairs,
    integrated_aux_energy,
    negative_defect_functional,
    reconstruct_min_defect,
    residual,
    select_min_functional,
    verify,
    with_defect_profile,
)

SMALL_PAIRS = [(0, 1), (0, 32), (3, 17), (10, 11), (20, 32)]


def zero_path(system):
    return TestPath("zero", np.zeros((1, system.test_dim)), 0.0)


def static_momentum_path(system, scale=1.0):
    disc = system.params["disc"]
    a = np.zeros(disc.n_modes)
    a[1] = scale
    return TestPath("mode-2", np.concatenate([np.zeros(disc.n), a])[None, :], 1.0)


@pytest.mark.parametrize("mode", MODES)
def test_zero_test_path_leaves_the_energy_difference(ek_setup, ek_run, mode):
    system, _ = ek_setup
    for i, j in SMALL_PAIRS:
        r = residual(system, ek_run, zero_path(system), ek_run.times[i], ek_run.times[j], mode)
        assert r == pytest.approx(ek_run.aux_energy[j] - ek_run.aux_energy[i], abs=1e-14)


def test_stationary_trajectory_has_zero_residual(ek_grid):
    u0, rho_bar = ek.initial_state(ek_grid, np.full(ek_grid.n_nodes, 1.0))
    system = ek.make_system(ek_grid, 2.0, rho_bar)
    times = np.linspace(0.0, 1.0, 9)
    states = np.tile(u0, (9, 1))
    traj = Trajectory(times, states, np.full(9, system.energy(u0)))
    rep = verify(system, traj, ek.test_paths(system, 1.0, 1 / 8, 4), tol=1e-10)
    assert abs(rep.max_residual) <= 1e-10


def test_inflating_the_energy_lowers_the_residual_linearly(ek_setup, ek_run):
    system, _ = ek_setup
    path = static_momentum_path(system)
    k_value = system.reg_weight(path(0.0))
    assert k_value > 0
    table = PathTable(system, ek_run, path)
    shift = 0.01
    for i, j in SMALL_PAIRS:
        before = table.residual(ek_run.aux_energy, i, j)
        after = table.residual(ek_run.aux_energy + shift, i, j)
        expected = -(ek_run.times[j] - ek_run.times[i]) * k_value * shift
        assert after - before == pytest.approx(expected, rel=1e-10, abs=1e-15)


def test_stepper_output_passes_and_garbage_fails(ek_setup, ek_run, ek_family):
    system, _ = ek_setup
    rep = verify(system, ek_run, ek_family, tol=1e-6)
    assert rep.passed
    assert len(rep.entries) == len(ek_family) * len(default_pairs(len(ek_run)))
    states = ek_run.states.copy()
    disc = system.params["disc"]
    rng = np.random.default_rng(0)
    m = rng.standard_normal(disc.n)
    m[0] = m[-1] = 0.0
    states[10, disc.n :] += m
    garbage = Trajectory(ek_run.times, states, [system.energy(u) for u in states])
    bad = verify(system, garbage, ek_family, tol=1e-6)
    assert not bad.passed
    assert bad.max_residual > 1e-3


def test_empty_family_is_vacuous(ek_setup, ek_run):
    system, _ = ek_setup
    rep = verify(system, ek_run, [], tol=1e-6)
    assert rep.max_residual == -math.inf and rep.passed and rep.entries == []


def test_invalid_pairs_are_rejected(ek_setup, ek_run, ek_family):
    system, _ = ek_setup
    with pytest.raises(ValueError):
        verify(system, ek_run, ek_family[:1], pairs=[(3, 3)])
    with pytest.raises(ValueError):
        verify(system, ek_run, ek_family[:1], pairs=[(0, 99)])


def test_default_pairs_enumerate_then_sample():
    assert default_pairs(5) == [(i, j) for i in range(5) for j in range(i + 1, 5)]
    sampled = default_pairs(300, cap=1000, seed=3)
    assert len(sampled) <= 1000
    assert len(set(sampled)) == len(sampled)
    assert all(0 <= i < j < 300 for i, j in sampled)
    assert {j - i for i, j in sampled} >= {1, 299}
    assert sampled == default_pairs(300, cap=1000, seed=3)


def test_wrong_dimension_path_is_inadmissible(ek_setup, ek_run):
    system, _ = ek_setup
    path = TestPath("short", np.zeros((1, system.test_dim - 1)), 1.0)
    with pytest.raises(InadmissibleTest):
        verify(system, ek_run, [path])


def test_binormal_path_above_unit_sup_norm_is_inadmissible(bn_system, bn_run):
    d = np.zeros(bn_system.test_dim)
    d[11] = 1.0
    bound = bn_system.params["basis"].sup_norm_bound(d)
    path = TestPath("loud", d[None, :], 2.0 / bound)
    with pytest.raises(InadmissibleTest):
        verify(bn_system, bn_run, [path])
    assert verify(bn_system, bn_run, [path.scaled(0.25)], tol=1e-6).passed


def test_apriori_bounds_on_stepper_output(ek_setup, ek_run):
    system, _ = ek_setup
    rep = apriori_check(system, ek_run, float(ek_run.aux_energy[0]), step_tol=1e-8)
    assert rep.rate == 0.0
    assert all(rep.checks.values())
    assert rep.margin >= 0


def test_apriori_flags_an_upward_jump(ek_setup, ek_run):
    system, _ = ek_setup
    aux = ek_run.aux_energy.copy()
    aux[5:] += 0.05
    rep = apriori_check(system, ek_run.with_energy(aux), float(aux[0]))
    assert not rep.monotone
    assert not rep.checks["monotone"]
    assert not rep.checks["energy"]


def test_concatenate_rejoins_a_split_run(ek_setup, ek_run, ek_family):
    system, _ = ek_setup
    first, second = ek_run.restrict(0, 16), ek_run.restrict(16, 32)
    joined = concatenate(system, first, second, ek_family, float(ek_run.times[16]))
    np.testing.assert_array_equal(joined.times, ek_run.times)
    np.testing.assert_array_equal(joined.states, ek_run.states)
    np.testing.assert_array_equal(joined.aux_energy, ek_run.aux_energy)


def test_concatenate_refuses_mismatched_junctions(ek_setup, ek_run, ek_family):
    system, _ = ek_setup
    first, second = ek_run.restrict(0, 16), ek_run.restrict(16, 32)
    with pytest.raises(ValueError):
        concatenate(system, first, ek_run.restrict(17, 32), ek_family, float(ek_run.times[16]))
    moved = second.states.copy()
    moved[0, system.params["disc"].n + 5] += 0.1
    with pytest.raises(ValueError):
        concatenate(system, first, Trajectory(second.times, moved, second.aux_energy), ek_family, float(ek_run.times[16]))
    with pytest.raises(ValueError):
        concatenate(system, first, second.with_energy(second.aux_energy + 1.0), ek_family, float(ek_run.times[16]))


def test_two_runs_join_into_the_full_run(ek_setup, ek_run, ek_family):
    system, u0 = ek_setup
    cfg = SolverConfig()
    first = run(system, u0, 0.125, 16, solver_cfg=cfg)
    tail = run(system, first.states[-1], 0.125, 16, solver_cfg=cfg)
    second = Trajectory(tail.times + 0.125, tail.states, tail.aux_energy, tail.provenance, tail.certificates)
    joined = concatenate(system, first, second, ek_family, 0.125)
    np.testing.assert_allclose(joined.states, ek_run.states, atol=1e-12)
    assert verify(system, joined, ek_family, tol=1e-6).passed


def test_min_defect_of_stepper_output_is_its_energy(ek_setup, ek_run, ek_family):
    system, _ = ek_setup
    curve = reconstruct_min_defect(system, ek_run, ek_family[:4], SMALL_PAIRS, tol=1e-8)
    assert curve.feasible
    np.testing.assert_allclose(curve.values, curve.energies, atol=1e-12)


def test_min_defect_repairs_a_random_walk(ek_setup, ek_run, ek_family):
    system, _ = ek_setup
    disc = system.params["disc"]
    rng = np.random.default_rng(5)
    states = ek_run.states.copy()
    for k in range(1, len(states)):
        m = 0.05 * rng.standard_normal(disc.n)
        m[0] = m[-1] = 0.0
        states[k, disc.n :] = states[k - 1, disc.n :] + m
    walk = Trajectory(ek_run.times, states, [system.energy(u) for u in states])
    family = ek_family[:4]
    assert not verify(system, walk, family, tol=1e-8).passed
    curve = reconstruct_min_defect(system, walk, family, tol=1e-8)
    assert curve.feasible
    assert np.all(curve.defect >= -1e-12)
    assert np.max(curve.defect) > 0
    assert verify(system, walk.with_energy(curve.values), family, tol=1e-7).passed


def test_min_defect_on_a_single_node(ek_setup, ek_run, ek_family):
    system, _ = ek_setup
    one = ek_run.restrict(0, 0)
    curve = reconstruct_min_defect(system, one, ek_family)
    assert curve.feasible
    np.testing.assert_array_equal(curve.values, curve.energies)


def test_infeasible_rows_report_the_smallest_violation(ek_setup, ek_run, monkeypatch):
    system, _ = ek_setup
    one = ek_run.restrict(0, 0)
    energy0 = float(system.energy(one.states[0]))
    # a single row E_0 <= -1 contradicts E_0 >= energy(U_0) >= 0
    monkeypatch.setattr(sys.modules["envar.verify"], "constraint_rows",
                        lambda *args, **kwargs: (np.ones((1, 1)), np.zeros(1), np.array([energy0])))
    curve = reconstruct_min_defect(system, one, [], [(0, 0)], tol=-1.0)
    assert not curve.feasible
    assert curve.certificate["min_total_violation"] == pytest.approx(energy0 + 1.0)
    assert curve.certificate["multipliers"] == {0: pytest.approx(1.0)}


@pytest.mark.parametrize("mode", MODES)
@given(st.lists(st.floats(-1.0, 1.0), min_size=33, max_size=33))
def test_residual_is_affine_in_the_energy_curve(ek_setup, ek_run, ek_family, mode, shift):
    system, _ = ek_setup
    coeffs, offset, _ = _rows(system, ek_run, ek_family, mode)
    aux = ek_run.aux_energy + np.array(shift)
    direct = [PathTable(system, ek_run, p, mode).residual(aux, i, j) for p in ek_family[:2] for i, j in SMALL_PAIRS]
    np.testing.assert_allclose(offset + coeffs @ aux, direct, rtol=1e-10, atol=1e-10)


_ROWS_CACHE = {}


def _rows(system, traj, family, mode):
    if mode not in _ROWS_CACHE:
        _ROWS_CACHE[mode] = constraint_rows(system, traj, family[:2], SMALL_PAIRS, mode)
    return _ROWS_CACHE[mode]


@given(st.floats(0.0, 1e-2), st.lists(st.floats(0.0, 1.0), min_size=33, max_size=33))
def test_nonincreasing_defect_profile_never_raises_residuals(ek_setup, ek_run, ek_family, level, drops):
    system, _ = ek_setup
    profile = level * np.sort(np.array(drops))[::-1]
    shifted = with_defect_profile(ek_run, profile)
    for path in ek_family[:3]:
        table = PathTable(system, ek_run, path)
        for i, j in SMALL_PAIRS:
            assert table.residual(shifted.aux_energy, i, j) <= table.residual(ek_run.aux_energy, i, j) + 1e-14


def test_selection_prefers_the_lowest_index_on_ties(ek_run):
    flat = [ek_run, ek_run.with_energy(ek_run.aux_energy + 1e-4), ek_run]
    pick = select_min_functional(flat, constant_functional)
    assert pick.index == 0 and pick.tied == [0, 1, 2]
    pick = select_min_functional(flat, integrated_aux_energy)
    assert pick.index == 0 and pick.tied == [0, 2]


def test_selection_with_negative_defect_picks_the_largest_defect(ek_setup, ek_run, ek_family):
    system, _ = ek_setup
    cands = [ek_run.with_energy(ek_run.aux_energy + c) for c in (0.0, 2e-4, 1e-4)]
    pick = select_min_functional(cands, negative_defect_functional(system), system, ek_family[:2])
    assert pick.index == 1


def test_selection_rejects_failing_or_empty_candidates(ek_setup, ek_run, ek_family):
    system, _ = ek_setup
    with pytest.raises(ValueError):
        select_min_functional([], constant_functional)
    rising = ek_run.with_energy(ek_run.aux_energy + np.linspace(0.0, 1.0, len(ek_run)))
    with pytest.raises(ValueError):
        select_min_functional([ek_run, rising], constant_functional, system, ek_family[:2])
    with pytest.raises(ValueError):
        select_min_functional([ek_run], lambda traj: math.nan)


def test_binormal_run_passes_verification(bn_system, bn_run):
    family = bn.test_paths(bn_system, float(bn_run.times[-1]), 4)
    rep = verify(bn_system, bn_run, family, tol=1e-6)
    assert rep.passed
