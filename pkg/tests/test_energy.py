import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nlobstacle.domain import ExteriorRule, ExteriorSpec, FractionalOrder, GraphFunction, IndicatorGrid
from nlobstacle.energy import (EnergyBreakdown, SetEnergy, exterior_potential, graph_area,
                               graph_area_grad, graph_quadratic_energy, interaction, perimeter,
                               s_perimeter, two_membranes_energy)
from nlobstacle.errors import DivergenceError, InputError, SharpnessError
from nlobstacle.kernels import GraphOperator, KernelSpec
from nlobstacle.oracle import dense_interaction

O = FractionalOrder(0.25)
EMPTY = ExteriorRule("empty")


def _grid(cells, h=1 / 8, lo=(-0.5, -0.5), ext=EMPTY):
    return IndicatorGrid(np.asarray(lo, float), h, np.asarray(cells, float), ext)


cell_sets = st.lists(st.booleans(), min_size=64, max_size=64).map(lambda b: np.array(b).reshape(8, 8))


@settings(max_examples=20, deadline=None)
@given(cell_sets)
def test_interaction_symmetric_and_additive(m):
    A = _grid(m)
    B = _grid(~m)
    assert interaction(A, B, O) == pytest.approx(interaction(B, A, O), rel=1e-12)
    half = np.zeros_like(m)
    half[:4] = True
    B1, B2 = _grid(~m & half), _grid(~m & ~half)
    assert interaction(A, B, O) == pytest.approx(interaction(A, B1, O) + interaction(A, B2, O), rel=1e-10)


def test_interaction_overlap_diverges():
    m = np.zeros((8, 8), bool)
    m[2:4, 2:4] = True
    with pytest.raises(DivergenceError):
        interaction(_grid(m), _grid(m), O)


def test_interaction_matches_dense_oracle():
    rng = np.random.default_rng(3)
    a = rng.random((8, 8)) < 0.4
    b = ~a & (rng.random((8, 8)) < 0.6)
    ref = dense_interaction(_grid(a), _grid(b), O)
    assert interaction(_grid(a), _grid(b), O) == pytest.approx(ref.value, rel=1e-6)


def test_interaction_cell_scaling():
    m = np.zeros((8, 8), bool)
    m[:3] = True
    val = [interaction(_grid(m, h), _grid(~m, h), O) for h in (1 / 8, 1 / 4)]
    # L scales like h^{2n - (n + 2s)} = h^{n - 2s}
    assert val[1] / val[0] == pytest.approx(2 ** 1.5, rel=1e-12)


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2 ** 31 - 1), st.integers(0, 63), st.floats(0, 1))
def test_set_energy_affine_in_each_cell(seed, k, t):
    rule = ExteriorRule.halfspace((0, 1), 0.0)
    E = IndicatorGrid.from_function(rule, (-0.5, -0.5), (0.5, 0.5), 1 / 8, rule)
    se = SetEnergy(E, O)
    th = np.random.default_rng(seed).random(E.shape)
    i = np.unravel_index(k, E.shape)

    def at(v):
        x = th.copy()
        x[i] = v
        return se.energy(x)

    e0, e1 = at(0.0), at(1.0)
    assert at(t) == pytest.approx((1 - t) * e0 + t * e1, rel=1e-10, abs=1e-10)
    assert se.gradient(th)[i] == pytest.approx(e1 - e0, rel=1e-8)


def test_s_perimeter_of_sharp_set_equals_set_energy():
    rule = ExteriorRule.halfspace((0, 1), 0.0)
    E = IndicatorGrid.from_function(lambda x: ((x[..., 1] < 0) | (np.sum(x ** 2, -1) < 0.04)).astype(float),
                                    (-0.5, -0.5), (0.5, 0.5), 1 / 16, rule)
    w = ((-0.25, -0.25), (0.25, 0.25))
    assert s_perimeter(E, w, O) == pytest.approx(SetEnergy(E, O, w).energy(E.cells))
    with pytest.raises(InputError):
        s_perimeter(E, ((-1, -1), (0.25, 0.25)), O)


def test_ball_s_perimeter_scaling():
    # dilating the set together with its grid scales the energy by lam^{n-2s}
    vals = []
    for lam in (1, 2):
        B = IndicatorGrid.from_function(lambda x: (np.sum(x ** 2, -1) < (0.25 * lam) ** 2).astype(float),
                                        (-lam, -lam), (lam, lam), lam / 32, EMPTY)
        vals.append(s_perimeter(B, None, O))
    assert vals[1] / vals[0] == pytest.approx(2 ** 1.5, rel=1e-9)


def test_exterior_potential_of_empty_rule_is_zero():
    E = _grid(np.zeros((8, 8)))
    assert np.all(exterior_potential(EMPTY, E, O) == 0)
    full = exterior_potential(ExteriorRule("full"), E, O)
    up = exterior_potential(ExteriorRule.halfspace((0, 1), -0.5), E, O)
    down = exterior_potential(ExteriorRule.halfspace((0, -1), 0.5), E, O)
    # complementary half-spaces meeting at the box edge partition the box exterior
    assert np.allclose(up + down, full, rtol=1e-6)
    assert np.all(full > 0)


def test_perimeter_of_square_and_sharpness():
    m = np.zeros((32, 32))
    m[8:24, 8:24] = 1
    sq = IndicatorGrid(np.array([-1.0, -1.0]), 1 / 16, m, EMPTY)
    assert perimeter(sq) == pytest.approx(4.0, rel=0.1)
    with pytest.raises(SharpnessError):
        perimeter(sq.with_cells(0.5 * m))
    assert perimeter(sq.with_cells(0.5 * m), relaxed=True) == pytest.approx(2.0, rel=0.1)


@settings(max_examples=15, deadline=None)
@given(st.floats(-2, 2), st.floats(-1, 1))
def test_graph_area_of_plane(a, b):
    u = GraphFunction.from_function(lambda x: a * x[..., 0] + b, 1, 1.0, 1 / 16,
                                    ExteriorSpec.plane((a,), b))
    assert graph_area(u) == pytest.approx(2 * np.sqrt(1 + a * a), rel=1e-10)
    assert perimeter(u) == graph_area(u)


def test_graph_area_gradient():
    rng = np.random.default_rng(1)
    u = GraphFunction(2, 0.5, 1 / 8, 0.1 * rng.standard_normal((8, 8)))
    g = graph_area_grad(u)
    d = rng.standard_normal((8, 8))
    t = 1e-6
    fd = (graph_area(u.with_values(u.values + t * d)) - graph_area(u.with_values(u.values - t * d))) / (2 * t)
    assert fd == pytest.approx(float(np.sum(g * d)), rel=1e-6)


def test_membranes_energy_breakdown():
    h = 1 / 16
    u = GraphFunction.from_function("0.1*maximum(0, 1-x**2)", 1, 1.0, h)
    v = u.with_values(u.values - 0.05)
    f = u.with_values(np.ones(32))
    g = u.with_values(-np.ones(32))
    q = two_membranes_energy(u, v, f, g, O)
    op = GraphOperator(u, KernelSpec(O, h))
    assert q.s_perimeter == pytest.approx(2 * op.Js(u.values))
    assert q.s_perimeter == pytest.approx(2 * graph_quadratic_energy(u, O))
    assert q.forcing_E == pytest.approx(h * np.sum(u.values))
    assert q.total == pytest.approx(q.s_perimeter + q.perimeter + q.forcing_E + q.forcing_F)
    x = two_membranes_energy(u, v, f, g, O, mode="exact")
    assert x.s_perimeter == pytest.approx(q.s_perimeter, rel=0.05)
    assert EnergyBreakdown.from_record(q.to_record()) == q
    with pytest.raises(InputError):
        two_membranes_energy(u, v, f, g, O, window=((-0.5,), (0.5,)))
    with pytest.raises(InputError):
        EnergyBreakdown(1.0, 1.0, 1.0, 1.0, total=5.0)
