import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nlobstacle.domain import ExteriorRule, ExteriorSpec, FractionalOrder, GraphFunction, IndicatorGrid
from nlobstacle.errors import ConfigurationError, NotABoundaryPointError, ResolutionError
from nlobstacle.kernels import (GraphOperator, KernelSpec, face_point, frac_laplacian,
                                frac_laplacian_field, fractional_curvature_graph,
                                fractional_curvature_set, linearization_error, truncated_curvature,
                                truncated_frac_laplacian, truncated_kernel_fE)

O = FractionalOrder(0.25)


def _halfspace(normal, offset=0.0, h=1 / 16, R=1.0):
    rule = ExteriorRule.halfspace(normal, offset)
    return IndicatorGrid.from_function(rule, (-R, -R), (R, R), h, rule)


def test_spec_defaults_and_validation():
    sp = KernelSpec(O, 1 / 64)
    assert sp.near_field_split == pytest.approx(8 / 64)
    assert sp.far_field_radius == pytest.approx(16.0)
    with pytest.raises(ConfigurationError):
        KernelSpec(O, 1 / 64, near_field_split=0.3)
    with pytest.raises(ConfigurationError):
        KernelSpec(O, 0.0)


@settings(max_examples=10, deadline=None)
@given(st.floats(-2, 2), st.floats(-0.5, 0.5))
def test_planes_have_zero_curvature_at_the_symmetric_cell(a, b):
    h = 2 / 33
    u = GraphFunction.from_function(lambda x: a * x[..., 0] + b, 1, 1.0, h, ExteriorSpec.plane((a,), b))
    sp = KernelSpec(O, h)
    assert abs(frac_laplacian(u, sp, (16,))) < 1e-10
    assert abs(fractional_curvature_graph(u, sp, (16,))) < 1e-10


def test_plane_residual_converges_off_centre():
    err = []
    for n in (33, 65, 129):
        u = GraphFunction.from_function(lambda x: x[..., 0], 1, 1.0, 2 / n, ExteriorSpec.plane((1.0,), 0.0))
        err.append(abs(frac_laplacian(u, KernelSpec(O, 2 / n), (n // 2 + n // 4,))))
    assert err[1] < err[0] / 3 and err[2] < err[1] / 3


def test_constants_are_exact():
    h = 1 / 32
    u = GraphFunction.from_function("0.3 + 0*x", 1, 1.0, h, ExteriorSpec.plane((0.0,), 0.3))
    sp = KernelSpec(O, h)
    assert np.max(np.abs(frac_laplacian_field(u, sp))) < 1e-12


@settings(max_examples=10, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 2 ** 31 - 1))
def test_frac_laplacian_is_linear(a, b, seed):
    h = 1 / 16
    rng = np.random.default_rng(seed)
    u1 = GraphFunction(1, 1.0, h, rng.standard_normal(32))
    u2 = GraphFunction(1, 1.0, h, rng.standard_normal(32))
    sp = KernelSpec(O, h)
    L = frac_laplacian_field(u1.with_values(a * u1.values + b * u2.values), sp)
    ref = a * frac_laplacian_field(u1, sp) + b * frac_laplacian_field(u2, sp)
    assert np.allclose(L, ref, atol=1e-9 * (1 + np.max(np.abs(ref))))


def test_operator_matrix_symmetric_and_gradient():
    h = 1 / 16
    u = GraphFunction.from_function("exp(-4*x**2)", 1, 1.0, h)
    op = GraphOperator(u, KernelSpec(O, h))
    A, b = op.matrix
    A = np.asarray(A.todense()) if hasattr(A, "todense") else np.asarray(A)
    assert np.allclose(A, A.T, atol=1e-12 * np.max(np.abs(A)))
    assert np.allclose(op.Js_grad(u.values), -h * op.lap(u.values))


def test_truncated_laplacian_of_local_bump_ignores_far_field():
    h = 1 / 64
    u = GraphFunction.from_function("maximum(0, 1-(x/0.1)**2)**2", 1, 1.0, h)
    sp = KernelSpec(O, h)
    full = frac_laplacian(u, sp, (64,))
    trunc = truncated_frac_laplacian(u, sp, (64,))
    assert trunc == pytest.approx(full, rel=0.05)
    assert trunc != full


def test_exact_curvature_matches_linearization_for_flat_graphs():
    h = 1 / 64
    sp = KernelSpec(O, h)
    g = []
    for eps in (1e-2, 1e-3):
        u = GraphFunction.from_function(f"{eps}*maximum(0, 1-4*x**2)**2", 1, 1.0, h)
        g.append(abs(linearization_error(u, sp, (64,))))
        K = fractional_curvature_graph(u, sp, (64,))
        assert K == pytest.approx(2 * frac_laplacian(u, sp, (64,)), rel=1e-2)
    # quadratic smallness in the amplitude
    assert g[1] < 2e-2 * g[0]
    zero = GraphFunction.from_function("0*x", 1, 1.0, h)
    assert linearization_error(zero, sp, (10,)) == 0.0


@pytest.mark.parametrize("normal,offset", [((0, 1), 0.0), ((1, 0), 0.25), ((0, -1), -0.125), ((-1, 0), 0.5)])
def test_axis_halfspace_curvature_vanishes(normal, offset):
    E = _halfspace(normal, offset, h=1 / 32)
    sp = KernelSpec(O, 1 / 32)
    e = np.asarray(E.exterior.normal)
    t = np.array([-e[1], e[0]])
    for a in (-0.6, 0.0, 0.45):
        y = e * E.exterior.offset + a * t
        assert abs(fractional_curvature_set(E, sp, y)) <= 1e-3
        assert abs(truncated_kernel_fE(E, sp, y)) <= 1e-3
        assert abs(truncated_curvature(E, sp, y, 0.3)) <= 1e-3


@settings(max_examples=8, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_curvature_antisymmetric_under_complement(seed):
    rng = np.random.default_rng(seed)
    h = 1 / 8
    E = IndicatorGrid.from_function(lambda x: (rng.random(x.shape[:-1]) < 0.5).astype(float),
                                    (-1, -1), (1, 1), h, ExteriorRule("empty"))
    if E.cells.min() == E.cells.max():
        return
    sp = KernelSpec(O, h)
    c = np.asarray(E.cells)
    # a face between two interior cells of different value
    faces = [(i, j) for i in range(3, 12) for j in range(3, 13) if c[i, j] != c[i + 1, j]]
    if not faces:
        return
    i, j = faces[rng.integers(len(faces))]
    x = E.lo + h * np.array([i + 1.0, j + 0.5])
    k1 = fractional_curvature_set(E, sp, x)
    k2 = fractional_curvature_set(E.complement(), sp, x)
    assert abs(k1 + k2) <= 1e-12 * max(1.0, abs(k1))


def test_curvature_translation_by_whole_cells():
    h = 1 / 16
    sp = KernelSpec(O, h)
    B1 = IndicatorGrid.from_function(lambda x: (np.sum(x ** 2, -1) < 0.16).astype(float),
                                     (-1, -1), (1, 1), h, ExteriorRule("empty"))
    shift = np.array([3 * h, -2 * h])
    B2 = IndicatorGrid.from_function(lambda x: (np.sum((x - shift) ** 2, -1) < 0.16).astype(float),
                                     (-1 + shift[0], -1 + shift[1]), (1 + shift[0], 1 + shift[1]), h,
                                     ExteriorRule("empty"))
    x = np.array([0.4, 0.0])
    assert fractional_curvature_set(B2, sp, x + shift) == pytest.approx(
        fractional_curvature_set(B1, sp, x), rel=1e-12)


def test_ball_curvature_scaling_exponent():
    h = 1 / 16
    K = []
    for lam in (1, 2):
        B = IndicatorGrid.from_function(lambda x: (np.sum(x ** 2, -1) < (0.25 * lam) ** 2).astype(float),
                                        (-lam, -lam), (lam, lam), h * lam, ExteriorRule("empty"))
        K.append(fractional_curvature_set(B, KernelSpec(O, h * lam), np.array([0.25 * lam, 0.0])))
    assert K[0] < 0
    assert np.log(K[1] / K[0]) / np.log(2) == pytest.approx(-0.5, abs=2e-2)


def test_boundary_point_errors():
    E = _halfspace((0, 1))
    sp = KernelSpec(O, 1 / 16)
    with pytest.raises(NotABoundaryPointError):
        face_point(E, np.array([0.0, 0.6]))
    with pytest.raises(ResolutionError):
        truncated_curvature(E, sp, np.array([0.0, 0.0]), 0.1)
    # faces whose near field leaves the box are refused, not guessed
    with pytest.raises(ResolutionError):
        fractional_curvature_set(E, sp, np.array([0.97, 0.0]))
    x0, axis = face_point(E, np.array([0.01, 0.02]))
    assert axis == 1 and x0[1] == pytest.approx(0.0)
