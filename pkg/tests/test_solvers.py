import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nlobstacle.domain import ExteriorRule, ExteriorSpec, FractionalOrder, GraphFunction, IndicatorGrid, Obstacle
from nlobstacle.energy import SetEnergy, graph_quadratic_energy
from nlobstacle.errors import ConfigurationError, InputError
from nlobstacle.oracle import exhaustive_active_set, exhaustive_set_min
from nlobstacle.solvers import (SolverConfig, solve_fractional_obstacle, solve_s_minimal_set,
                                solve_two_membranes)

O = FractionalOrder(0.25)


def test_config_validation():
    with pytest.raises(ConfigurationError):
        SolverConfig(max_iters=0)
    with pytest.raises(ConfigurationError):
        SolverConfig(step_rule="wolfe")
    with pytest.raises(ConfigurationError):
        SolverConfig(mode="cubic")
    with pytest.raises(ConfigurationError):
        SolverConfig.from_mapping({"tolerance": "1"})
    cfg = SolverConfig.from_mapping({"max_iters": "7", "newton": "no", "tol_kkt": "1e-6"})
    assert cfg.max_iters == 7 and cfg.newton is False and cfg.tol_kkt == 1e-6


@settings(max_examples=8, deadline=None)
@given(st.floats(0.05, 0.45), st.floats(0.2, 1.0), st.floats(-1.0, 1.0))
def test_obstacle_solution_is_feasible_and_stationary(s, a, f0):
    order = FractionalOrder(s)
    h = 1 / 32
    phi = GraphFunction.from_function(lambda x: a * (0.4 - 4 * x[..., 0] ** 2), 1, 1.0, h)
    f = phi.with_values(np.full(phi.values.shape, f0))
    rep = solve_fractional_obstacle(Obstacle(graph=phi), ExteriorSpec.zero(), f, order)
    u = rep.solution
    assert rep.converged, rep.message
    assert np.all(u.values >= phi.values - 1e-14)
    assert np.all(np.diff(rep.energy_trace) <= 1e-12 * np.abs(rep.energy_trace[:-1]) + 1e-15)
    assert rep.kkt_residual <= SolverConfig().tol_kkt


def test_obstacle_matches_active_set_oracle():
    phi = GraphFunction.from_function("0.3 - 2*x**2", 1, 1.0, 1 / 8)
    f = phi.with_values(np.full(16, 0.5))
    ref, uo = exhaustive_active_set(phi, ExteriorSpec.zero(), f, O)
    rep = solve_fractional_obstacle(Obstacle(graph=phi), ExteriorSpec.zero(), f, O)
    assert np.allclose(rep.solution.values, uo.values, atol=1e-8)
    E = graph_quadratic_energy(rep.solution, O) + (1 / 8) * float(np.sum(f.values * rep.solution.values))
    assert E == pytest.approx(ref.value, abs=1e-8)


def test_obstacle_below_data_is_inactive():
    phi = GraphFunction.from_function("-1 + 0*x", 1, 1.0, 1 / 16)
    rep = solve_fractional_obstacle(Obstacle(graph=phi), ExteriorSpec.zero(), None, O)
    assert np.allclose(rep.solution.values, 0.0, atol=1e-10)
    assert len(rep.contact) == 0


def test_obstacle_needs_graph():
    E = IndicatorGrid.from_function(lambda x: x[..., 0] < 0, (-1, -1), (1, 1), 0.5)
    with pytest.raises(InputError):
        solve_fractional_obstacle(Obstacle(set=E), ExteriorSpec.zero(), None, O)


def test_flat_membranes_stay_flat():
    f = GraphFunction.from_function("0*x", 1, 1.0, 1 / 16)
    rep = solve_two_membranes(ExteriorSpec.zero(), ExteriorSpec.zero(), f, f, O)
    U, V = rep.solution
    assert rep.converged
    assert np.max(np.abs(U.values)) < 1e-12 and np.max(np.abs(V.values)) < 1e-12


@pytest.mark.parametrize("mode", ["quadratic", "exact"])
def test_membranes_ordered_with_contact(mode):
    h = 1 / 32
    f = GraphFunction.from_function("2*maximum(0, 1-(x/0.5)**2)**2", 1, 1.0, h)
    g = f.with_values(-f.values)
    rep = solve_two_membranes(ExteriorSpec.zero(), ExteriorSpec.plane((0.0,), -0.1), f, g, O,
                              SolverConfig(mode=mode))
    U, V = rep.solution
    assert rep.converged, rep.message
    assert np.all(V.values <= U.values + 1e-14)
    assert len(rep.contact) > 0


def test_membranes_reject_crossed_exteriors():
    f = GraphFunction.from_function("0*x", 1, 1.0, 1 / 16)
    with pytest.raises(InputError):
        solve_two_membranes(ExteriorSpec.zero(), ExteriorSpec.plane((0.0,), 0.1), f, f, O)


def _set_case(seed):
    rule = ExteriorRule.halfspace((0, 1), 0.0)
    ext = IndicatorGrid.from_function(rule, (-0.5, -0.5), (0.5, 0.5), 1 / 8, rule)
    C = ext.centers()
    win = ((-0.25, -0.25), (0.25, 0.25))
    inside = np.all((C > win[0]) & (C < win[1]), -1)
    rng = np.random.default_rng(seed)
    return ext, Obstacle(set=ext.with_cells(((rng.random(ext.shape) < 0.3) & inside).astype(float))), win


@settings(max_examples=5, deadline=None)
@given(st.integers(0, 10 ** 6))
def test_set_solver_constraints_and_oracle(seed):
    ext, obst, win = _set_case(seed)
    rep = solve_s_minimal_set(obst, ext, O, window=win)
    E = np.asarray(rep.solution.cells)
    assert rep.solution.is_sharp
    assert np.all(E >= np.asarray(obst.set.cells))
    se = SetEnergy(ext, O, win)
    outside = ~se.omega
    assert np.array_equal(E[outside], np.asarray(ext.cells)[outside])
    ref, _ = exhaustive_set_min(obst, ext, O, window=win)
    assert se.energy(E) <= ref.value + 1e-6


def test_set_solver_keeps_halfspace():
    ext, _, win = _set_case(0)
    empty = Obstacle(set=ext.with_cells(np.zeros(ext.shape)))
    rep = solve_s_minimal_set(empty, ext, O, window=win)
    assert np.array_equal(rep.solution.cells, ext.cells)


def test_set_solver_is_deterministic():
    ext, obst, win = _set_case(7)
    a = solve_s_minimal_set(obst, ext, O, SolverConfig(newton=False, seed=3), window=win)
    b = solve_s_minimal_set(obst, ext, O, SolverConfig(newton=False, seed=3), window=win)
    assert np.array_equal(a.solution.cells, b.solution.cells)
    assert a.extra["energy"] == b.extra["energy"]
