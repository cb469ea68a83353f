import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nlobstacle.domain import (ContactSet, ExteriorRule, ExteriorSpec, FractionalOrder, GraphFunction,
                               IndicatorGrid, Obstacle, contact_set_from_mask, default_tol_contact,
                               dump_grid, eval_expr, evaluate, format_real, height_function,
                               indicator_at, load_grid, subgraph)
from nlobstacle.errors import InputError, UnsupportedExteriorError

orders = st.floats(min_value=1e-3, max_value=0.499)
finite = st.floats(min_value=-1e6, max_value=1e6, allow_nan=False)


@given(orders)
def test_order_accepts_open_interval(s):
    o = FractionalOrder(s)
    assert o.sbar == pytest.approx(0.5 + s)
    assert o.kernel_exponent(2) == pytest.approx(2 + 2 * s)
    assert o.sigma_am == pytest.approx(0.5 - s)


@pytest.mark.parametrize("s", [0.0, 0.5, -0.1, 1.0, float("nan"), float("inf")])
def test_order_rejects_outside(s):
    with pytest.raises(InputError):
        FractionalOrder(s)


@given(finite)
def test_format_real_roundtrips(x):
    assert float(format_real(x)) == x


def test_graph_shape_and_centres():
    u = GraphFunction.from_function("x**2", 1, 1.0, 0.25)
    assert u.values.shape == (8,)
    assert u.axis[0] == pytest.approx(-0.875)
    assert np.allclose(u.values, u.axis ** 2)
    v = GraphFunction.from_function("x + 2*y", 2, 0.5, 0.125)
    assert v.centers().shape == (8, 8, 2)
    assert v.values[3, 5] == pytest.approx(v.axis[3] + 2 * v.axis[5])


def test_graph_rejects_bad_input():
    with pytest.raises(InputError):
        GraphFunction(3, 1.0, 0.5, np.zeros((4, 4, 4)))
    with pytest.raises(InputError):
        GraphFunction(1, 1.0, 0.3, np.zeros(6))
    with pytest.raises(InputError):
        GraphFunction(1, 1.0, 0.5, np.zeros(5))
    with pytest.raises(InputError):
        GraphFunction(1, 1.0, 0.5, np.array([0, 0, np.nan, 0]))


def test_graph_values_are_read_only():
    u = GraphFunction.from_function("x", 1, 1.0, 0.5)
    with pytest.raises(ValueError):
        u.values[0] = 1.0


@given(st.floats(-3, 3), st.floats(-1, 1), st.floats(-3, 3))
def test_plane_exterior_outside_box(a, b, x):
    u = GraphFunction.from_function("0*x", 1, 1.0, 0.25, ExteriorSpec.plane((a,), b))
    if abs(x) > 1.0:
        assert evaluate(u, x) == pytest.approx(a * x + b)


def test_evaluate_interpolates_inside():
    u = GraphFunction.from_function("3*x - 1", 1, 1.0, 0.125)
    assert evaluate(u, 0.1) == pytest.approx(-0.7)
    w = GraphFunction.from_function("x - y", 2, 1.0, 0.25)
    assert evaluate(w, (0.2, -0.3)) == pytest.approx(0.5)


def test_finite_exteriors_need_outer_radius():
    with pytest.raises(UnsupportedExteriorError):
        ExteriorSpec("obstacle", slope=(0.0,), offset=0.0, outer_radius=float("inf"), expr="x")
    with pytest.raises(InputError):
        ExteriorSpec("spiral")


def test_eval_expr_names_and_errors():
    pts = np.array([[0.0, 1.0], [3.0, 4.0]])
    assert np.allclose(eval_expr("r", pts), [1.0, 5.0])
    assert np.allclose(eval_expr("maximum(x, y)", pts), [1.0, 4.0])
    assert eval_expr("2", pts).shape == (2,)
    with pytest.raises(InputError):
        eval_expr("__import__('os')", pts)


def test_rule_and_complement():
    rule = ExteriorRule.halfspace((0, 2), 0.5)
    assert rule.normal == pytest.approx((0.0, 1.0))
    pts = np.array([[0.0, 0.0], [0.0, 1.0]])
    assert np.array_equal(rule(pts), [1.0, 0.0])
    assert np.array_equal(rule.complement()(pts), [0.0, 1.0])
    assert ExteriorRule("empty").complement().kind == "full"
    with pytest.raises(InputError):
        ExteriorRule.halfspace((0, 0))


def test_indicator_grid_and_lookup():
    rule = ExteriorRule.halfspace((0, 1), 0.0)
    E = IndicatorGrid.from_function(rule, (-1, -1), (1, 1), 0.25, rule)
    assert E.shape == (8, 8)
    assert E.is_sharp
    assert indicator_at(E, (0.3, -0.1)) == 1.0
    assert indicator_at(E, (0.3, 0.1)) == 0.0
    assert indicator_at(E, (5.0, -3.0)) == 1.0
    assert E.complement().cells.sum() == 32
    with pytest.raises(InputError):
        IndicatorGrid.from_function(rule, (-1, -1), (1, 0.9), 0.25, rule)


@settings(max_examples=25, deadline=None)
@given(st.lists(st.floats(-0.45, 0.45), min_size=8, max_size=8))
def test_subgraph_height_roundtrip(vals):
    h = 0.125
    u = GraphFunction(1, 0.5, h, np.round(np.array(vals) / h) * h)
    E = subgraph(u, -0.5, 0.5)
    back = height_function(E)
    assert np.allclose(back.values, u.values)


def test_subgraph_exterior_rule_follows_plane():
    u = GraphFunction.from_function("0.5*x", 1, 1.0, 0.25, ExteriorSpec.plane((0.5,), 0.0))
    E = subgraph(u, -1, 1)
    assert indicator_at(E, (3.0, 1.4)) == 1.0
    assert indicator_at(E, (3.0, 1.6)) == 0.0


def test_obstacle_exactly_one_kind():
    u = GraphFunction.from_function("x", 1, 1.0, 0.5)
    with pytest.raises(InputError):
        Obstacle()
    with pytest.raises(InputError):
        Obstacle(graph=u, alpha=0.5)
    assert Obstacle(graph=u, c1alpha_seminorm=1.0, alpha=0.5).alpha == 0.5


@given(st.lists(st.booleans(), min_size=1, max_size=40))
def test_contact_boundary_is_subset(mask):
    Q = contact_set_from_mask(np.array(mask), 1e-6)
    assert set(Q.boundary_indices) <= set(Q.indices)
    assert np.array_equal(Q.mask(), np.array(mask))
    # an active cell is a boundary cell iff a neighbour inside the array is inactive
    m = np.array(mask)
    for (i,) in Q.indices:
        nb = [j for j in (i - 1, i + 1) if 0 <= j < m.size]
        assert ((i,) in Q.boundary_indices) == any(not m[j] for j in nb)


def test_default_tolerance_scaling():
    o = FractionalOrder(0.25)
    assert default_tol_contact(2 ** -10, o) / default_tol_contact(2 ** -9, o) == pytest.approx(2 ** -1.75)
    assert len(ContactSet((), 0.0, (), (3,))) == 0


@pytest.mark.parametrize("kind", ["graph", "plane", "indicator"])
def test_grid_files_roundtrip(tmp_path, kind):
    if kind == "graph":
        obj = GraphFunction.from_function("sin(3*x)*cos(y)", 2, 1.0, 0.25)
    elif kind == "plane":
        obj = GraphFunction.from_function("x/3", 1, 1.0, 0.125, ExteriorSpec.plane((1 / 3,), 0.1))
    else:
        rule = ExteriorRule.halfspace((1, 1), 0.1)
        obj = IndicatorGrid.from_function(rule, (-1, -1), (1, 1), 0.25, rule)
    p = tmp_path / "g.txt"
    dump_grid(obj, p)
    back = load_grid(p)
    if kind == "indicator":
        assert np.array_equal(back.cells, obj.cells) and back.exterior == obj.exterior
    else:
        assert np.array_equal(back.values, obj.values) and back.exterior == obj.exterior
    p2 = tmp_path / "g2.txt"
    dump_grid(back, p2)
    assert p.read_bytes() == p2.read_bytes()


def test_load_rejects_foreign_file(tmp_path):
    p = tmp_path / "x.txt"
    p.write_text("hello\n1\n")
    with pytest.raises(InputError):
        load_grid(p)
