"""Singular-integral evaluators on uniform grids.

Graph operators act on ``GraphFunction`` (base dimension d = n - 1) with the
kernel ``|y' - x'|^{-(n+2s)}``; set operators act on sharp ``IndicatorGrid``
(dimension n) with ``|y - x|^{-(n+2s)}``.  No normalizing constant is used.

Near-field cell weights are exact cell integrals of the kernel (Gauss-Legendre
tables), the self cell is replaced by a second-difference correction, farther
cells use the midpoint rule and everything outside the grid box is integrated
along rays with a Gauss-Jacobi rule that absorbs the algebraic decay.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Optional

import numpy as np

from . import _quadrature as Q
from .domain import FractionalOrder, GraphFunction, IndicatorGrid
from .errors import (ConfigurationError, InputError, NotABoundaryPointError,
                     ResolutionError, SharpnessError, SteepGraphError,
                     UnsupportedExteriorError)

__all__ = [
    "KernelSpec", "GraphOperator", "frac_laplacian", "truncated_frac_laplacian",
    "fractional_curvature_set", "fractional_curvature_graph", "truncated_kernel_fE",
    "linearization_error", "truncated_curvature", "frac_laplacian_field",
    "fractional_curvature_graph_field", "linearization_error_field", "face_point", "exterior_sign_tail",
]


@dataclass(frozen=True)
class KernelSpec:
    """Quadrature configuration for a grid of spacing ``spacing``.

    ``near_field_split`` defaults to 8h and ``far_field_radius`` to 64 times the
    truncation radius.
    """

    order: FractionalOrder
    spacing: float
    truncation_radius: Optional[float] = 0.25
    near_field_split: Optional[float] = None
    far_field_radius: Optional[float] = None
    slope_cap: float = 10.0
    check_ring: bool = True

    def __post_init__(self):
        if not self.spacing > 0:
            raise ConfigurationError("spacing must be positive")
        if self.near_field_split is None:
            split = 8.0 * self.spacing
            if self.truncation_radius is not None:
                split = min(split, 0.5 * self.truncation_radius)
            object.__setattr__(self, "near_field_split", split)
        if self.far_field_radius is None:
            base = self.truncation_radius if self.truncation_radius else 0.25
            object.__setattr__(self, "far_field_radius", 64.0 * base)
        d, t, R = self.near_field_split, self.truncation_radius, self.far_field_radius
        if not d > 0:
            raise ConfigurationError("near-field split must be positive")
        upper = t if t is not None else R
        if not (d < upper < R or (t is None and d < R)):
            raise ConfigurationError(
                f"need 0 < split ({d}) < truncation ({t}) < far radius ({R})")
        if self.check_ring:
            for dim in (1, 2):
                got, exact = Q.ring_mass_check(dim, self.order.kernel_exponent(dim + 1),
                                               self.near_cells)
                if abs(got - exact) > 1e-10 * exact:
                    raise ConfigurationError(
                        f"near-field weights miss the ring mass: {got} vs {exact}")

    @property
    def near_cells(self) -> int:
        return max(1, int(round(self.near_field_split / self.spacing)))

    @classmethod
    def for_grid(cls, order, grid, **kw):
        return cls(order, grid.spacing, **kw)


def _as_spec(spec, order, grid):
    if spec is None:
        return KernelSpec(order, grid.spacing)
    if abs(spec.spacing - grid.spacing) > 1e-12 * grid.spacing:
        raise ConfigurationError("kernel spec spacing does not match the grid")
    return spec


# --------------------------------------------------------------------------
# graph operators


class GraphOperator:
    """Discrete operators attached to one graph grid, order and exterior datum."""

    def __init__(self, u: GraphFunction, spec: KernelSpec, directions: Optional[int] = None,
                 tail_nodes: Optional[int] = None):
        self.d = u.dim
        self.n = u.n
        self.h = u.spacing
        self.R = u.radius
        self.exterior = u.exterior
        self.spec = spec
        self.order = spec.order
        self.s = spec.order.s
        self.p = self.order.kernel_exponent(self.d + 1)
        if (not self.exterior.is_plane()
                and self.exterior.outer_radius > spec.far_field_radius):
            raise UnsupportedExteriorError(
                "sampled exterior extends beyond the far-field radius")
        self.N = self.n ** self.d
        self.shape = (self.n,) * self.d
        self.multi = np.stack(np.unravel_index(np.arange(self.N), self.shape), axis=-1)
        self.centers = u.centers().reshape(self.N, self.d)
        # ring of exterior cells, as wide as the near field, keeps the
        # table-weighted sums symmetric up to the split radius
        self.g = max(1, spec.near_cells)
        self.ne = self.n + 2 * self.g
        self.Ne = self.ne ** self.d
        self.ext_multi = np.stack(np.unravel_index(np.arange(self.Ne), (self.ne,) * self.d),
                                  axis=-1)
        self.ext_centers = -self.R + self.h * (self.ext_multi - self.g + 0.5)
        inner = np.all((self.ext_multi >= self.g) & (self.ext_multi < self.g + self.n), axis=-1)
        self.interior_idx = np.ravel_multi_index(tuple((self.multi + self.g).T),
                                                 (self.ne,) * self.d)
        self.ghost_idx = np.flatnonzero(~inner)
        self.ghost_values = self.exterior(self.ext_centers[self.ghost_idx])
        self.box_lo = -self.R - self.g * self.h
        self.box_hi = self.R + self.g * self.h
        if directions is None:
            directions = 2 if self.d == 1 else 256
        if tail_nodes is None:
            tail_nodes = 48 if self.d == 1 else 24
        self._dirs, self._dw = Q.sphere_rule(self.d, directions)
        self._tail = Q.tail_rule(2 * self.s - 1, tail_nodes)

    def full(self, u):
        """Interior values embedded in the extended grid."""
        out = np.empty(self.Ne)
        out[self.interior_idx] = np.asarray(u).reshape(-1)
        out[self.ghost_idx] = self.ghost_values
        return out

    # -- weights ----------------------------------------------------------
    @cached_property
    def table(self):
        K = self.ne - 1
        T = Q.graph_cell_table(self.d, self.p, K, near=min(K, self.spec.near_cells))
        return T * self.h ** (self.d - self.p)

    @cached_property
    def c0(self):
        return 0.5 * Q.self_cell_moment(self.d, self.p) * self.h ** (self.d - self.p)

    def weights(self, rows, augmented=False):
        """Weights from interior cells ``rows`` to every extended cell.

        ``augmented`` adds the self-cell correction on unit offsets.
        """
        rows = np.atleast_1d(rows)
        K = self.ne - 1
        off = self.ext_multi[None, :, :] - (self.multi[rows] + self.g)[:, None, :] + K
        W = self.table[tuple(np.moveaxis(off, -1, 0))]
        if augmented:
            unit = np.sum(np.abs(off - K), axis=-1) == 1
            W = W + self.c0 * unit
        return W

    def distances(self, rows):
        rows = np.atleast_1d(rows)
        dz = self.ext_centers[None, :, :] - self.centers[rows][:, None, :]
        r = np.sqrt(np.sum(dz * dz, axis=-1))
        r[r == 0] = 1.0
        return r

    @cached_property
    def _W_full(self):
        return self.weights(np.arange(self.N), augmented=True)

    @cached_property
    def W_aug(self):
        return self._W_full[:, self.interior_idx]

    @cached_property
    def W_ghost(self):
        return self._W_full[:, self.ghost_idx]

    @cached_property
    def rho(self):
        return self.distances(np.arange(self.N))[:, self.interior_idx]

    @cached_property
    def rho_ghost(self):
        return self.distances(np.arange(self.N))[:, self.ghost_idx]

    def padded(self, vals):
        """Values with one ghost layer (exterior at ghost centres), shape (n+2)^d."""
        F = self.full(vals).reshape((self.ne,) * self.d)
        cut = slice(self.g - 1, self.g + self.n + 1)
        return F[(cut,) * self.d]

    # -- exterior rays ------------------------------------------------------
    @cached_property
    def _rays(self):
        r0 = Q.ray_box_distance(self.centers, self._dirs, self.box_lo, self.box_hi)
        t, _ = self._tail
        r = r0[:, :, None] / t[None, None, :]
        pts = self.centers[:, None, None, :] + r[..., None] * self._dirs[None, :, None, :]
        return r0, self.exterior(pts)

    def _ray_sum(self, rows, integrand, power):
        """sum_dirs w * r0^power * int_0^1 t^{2s-1} integrand(t, r0, uext) dt."""
        r0, uext = self._rays
        r0 = r0[rows]
        uext = uext[rows]
        t, wt = self._tail
        vals = integrand(t[None, None, :], r0[:, :, None], uext)
        return (r0 ** power * (vals @ wt)) @ self._dw

    @cached_property
    def ext_linear(self):
        """(M, B): exterior part of L u = B - M u, ghost cells included."""
        rows = np.arange(self.N)
        power = self.d + 1 - self.p
        M = self._ray_sum(rows, lambda t, r0, ue: t / r0 + 0 * ue, power)
        B = self._ray_sum(rows, lambda t, r0, ue: ue * t / r0, power)
        M = M + np.sum(self.W_ghost, axis=1)
        B = B + self.W_ghost @ self.ghost_values
        return M, B

    def ext_curvature(self, u, rows=None, derivative=False):
        """2 int G(|y - x|, u_ext(y) - u(x)) dy beyond the extended box."""
        rows = np.arange(self.N) if rows is None else np.atleast_1d(rows)
        u0 = np.asarray(u).reshape(-1)[rows][:, None, None]
        p = self.p
        power = self.d + 1 - self.p
        val = 2 * self._ray_sum(rows, lambda t, r0, ue: Q.col_F((ue - u0) * t / r0, p), power)
        if not derivative:
            return val
        der = -2 * self._ray_sum(rows, lambda t, r0, ue: Q.col_Fprime((ue - u0) * t / r0, p)
                                 * t / r0, power)
        return val, der

    def ext_energy(self, u):
        u0 = np.asarray(u).reshape(-1)[:, None, None]
        p = self.p
        power = self.d + 2 - self.p
        f = lambda t, r0, ue: (Q.col_psi((u0 - ue) * t / r0, p) - Q.col_psi(-ue * t / r0, p)) / t
        return self._ray_sum(np.arange(self.N), f, power)

    # -- linear operator ----------------------------------------------------
    @cached_property
    def matrix(self):
        """(A, b) with L u = A u + b on the cell values."""
        W = self.W_aug
        M, B = self.ext_linear
        A = W - np.diag(np.sum(W, axis=1) + M)
        return A, B

    def lap(self, u):
        A, b = self.matrix
        return A @ np.asarray(u).reshape(-1) + b

    def Js(self, u):
        """Quadratic energy 1/4 iint_{not both exterior} (u(x)-u(y))^2 K, constants dropped."""
        u = np.asarray(u).reshape(-1)
        W = self.W_aug
        M, B = self.ext_linear
        quad = 0.5 * u @ (np.sum(W, axis=1) * u - W @ u)
        return self.h ** self.d * (quad + 0.5 * np.sum(M * u * u) - np.sum(B * u))

    def Js_grad(self, u):
        return -self.h ** self.d * self.lap(u)

    # -- nonlinear graph perimeter (energy-consistent curvature) -------------
    def curvature_h(self, u, jacobian=False):
        """Curvature whose negative (times h^d) is the exact gradient of ``pgraph``."""
        u = np.asarray(u).reshape(-1)
        W, rho, p = self.W_aug, self.rho, self.p
        a = u[None, :] - u[:, None]
        ag = self.ghost_values[None, :] - u[:, None]
        K = 2 * np.sum(W * Q.G_hat(rho, a, p), axis=1)
        K += 2 * np.sum(self.W_ghost * Q.G_hat(self.rho_ghost, ag, p), axis=1)
        ext = self.ext_curvature(u, derivative=jacobian)
        if not jacobian:
            return K + ext
        K += ext[0]
        J = 2 * W * Q.col_Fprime(a / rho, p)
        np.fill_diagonal(J, 0.0)
        diag = -np.sum(J, axis=1)
        diag -= 2 * np.sum(self.W_ghost * Q.col_Fprime(ag / self.rho_ghost, p), axis=1)
        diag += ext[1]
        J[np.diag_indices(self.N)] = diag
        return K, J

    def pgraph(self, u):
        """Nonlinear graph s-perimeter excess over the zero interior; gradient is -h^d * curvature_h."""
        u = np.asarray(u).reshape(-1)
        p = self.p
        a = u[:, None] - u[None, :]
        inner = 0.5 * np.sum(self.W_aug * Q.Psi_hat(self.rho, a, p))
        ag = u[:, None] - self.ghost_values[None, :]
        ghost = np.sum(self.W_ghost * (Q.Psi_hat(self.rho_ghost, ag, p)
                                       - Q.Psi_hat(self.rho_ghost, -self.ghost_values[None, :], p)))
        return self.h ** self.d * (inner + ghost + np.sum(self.ext_energy(u)))

    # -- reference evaluators -------------------------------------------------
    def derivatives(self, u):
        """Centred gradient (N, d) and Hessian (N, d, d) with ghost values."""
        P = self.padded(u)
        h = self.h
        if self.d == 1:
            g = (P[2:] - P[:-2]) / (2 * h)
            H = (P[2:] - 2 * P[1:-1] + P[:-2]) / h ** 2
            return g[:, None], H[:, None, None]
        c = P[1:-1, 1:-1]
        gx = (P[2:, 1:-1] - P[:-2, 1:-1]) / (2 * h)
        gy = (P[1:-1, 2:] - P[1:-1, :-2]) / (2 * h)
        hxx = (P[2:, 1:-1] - 2 * c + P[:-2, 1:-1]) / h ** 2
        hyy = (P[1:-1, 2:] - 2 * c + P[1:-1, :-2]) / h ** 2
        hxy = (P[2:, 2:] - P[2:, :-2] - P[:-2, 2:] + P[:-2, :-2]) / (4 * h ** 2)
        g = np.stack([gx.ravel(), gy.ravel()], axis=-1)
        H = np.stack([np.stack([hxx.ravel(), hxy.ravel()], -1),
                      np.stack([hxy.ravel(), hyy.ravel()], -1)], axis=-2)
        return g, H

    def check_slope(self, u):
        g, _ = self.derivatives(u)
        m = float(np.max(np.abs(g))) if g.size else 0.0
        if m > self.spec.slope_cap:
            raise SteepGraphError(f"discrete slope {m:.3g} exceeds the cap {self.spec.slope_cap}")

    def self_term(self, u, rows, nonlinear):
        g, H = self.derivatives(u)
        g, H = g[rows], H[rows]
        p = self.p
        if self.d == 1:
            S = Q.self_cell_moment(1, p) * self.h ** (3 - p)
            fac = Q.col_Fprime(g[:, 0], p) if nonlinear else 1.0
            return S * fac * H[:, 0, 0]
        dirs, wth = Q.self_cell_directional(p)
        quad = np.einsum("ta,nab,tb->nt", dirs, H, dirs)
        fac = Q.col_Fprime(g @ dirs.T, p) if nonlinear else 1.0
        return self.h ** (4 - p) * np.sum(fac * quad * wth, axis=1)

    def _rows_apply(self, rows, fn, chunk=512):
        out = []
        for i in range(0, len(rows), chunk):
            out.append(fn(rows[i:i + chunk]))
        return np.concatenate(out) if out else np.zeros(0)

    def frac_laplacian_rows(self, u, rows, radius=None):
        u = np.asarray(u).reshape(-1)
        uf = self.full(u)
        rows = np.atleast_1d(rows)

        def block(r):
            W = self.weights(r)
            if radius is not None:
                W = np.where(self.distances(r) < radius, W, 0.0)
            return np.sum(W * (uf[None, :] - u[r][:, None]), axis=1)

        val = self._rows_apply(rows, block)
        # second-difference self term, 1/2 S h^{d+2-p} trace(H)
        val = val + 0.5 * self.self_term(u, rows, nonlinear=False)
        if radius is None:
            power = self.d + 1 - self.p
            val = val + self._ray_sum(rows, lambda t, r0, ue: (ue - u[rows][:, None, None]) * t / r0,
                                      power)
        else:
            val = val + self._ext_truncated(u, rows, radius)
        return val

    def _ext_truncated(self, u, rows, radius, nodes=32):
        """Linear integrand beyond the extended box but inside the ball of radius ``radius``."""
        r0 = Q.ray_box_distance(self.centers[rows], self._dirs, self.box_lo, self.box_hi)
        out = np.zeros(len(rows))
        inside = r0 < radius
        if not np.any(inside):
            return out
        x, w = np.polynomial.legendre.leggauss(nodes)
        # r = r0 (radius/r0)^tau, tau in [0, 1]
        lr = np.log(np.maximum(radius / r0, 1.0))
        tau = 0.5 * (x + 1)
        r = r0[..., None] * np.exp(lr[..., None] * tau)
        pts = self.centers[rows][:, None, None, :] + r[..., None] * self._dirs[None, :, None, :]
        ue = self.exterior(pts)
        u0 = np.asarray(u).reshape(-1)[rows][:, None, None]
        integrand = (ue - u0) * r ** (self.d - self.p) * lr[..., None]
        val = (integrand @ (0.5 * w)) * inside
        return val @ self._dw

    def curvature_rows(self, u, rows):
        u = np.asarray(u).reshape(-1)
        uf = self.full(u)
        rows = np.atleast_1d(rows)
        p = self.p

        def block(r):
            W = self.weights(r)
            a = uf[None, :] - u[r][:, None]
            return 2 * np.sum(W * Q.G_hat(self.distances(r), a, p), axis=1)

        val = self._rows_apply(rows, block)
        val = val + self.self_term(u, rows, nonlinear=True)
        return val + self.ext_curvature(u, rows)


def _row_index(u: GraphFunction, x) -> int:
    """Flat cell index from an index tuple/int or a coordinate (snapped to the nearest centre)."""
    if isinstance(x, (int, np.integer)):
        idx = (int(x),)
    elif isinstance(x, tuple) and all(isinstance(v, (int, np.integer)) for v in x):
        idx = tuple(int(v) for v in x)
    else:
        x = np.atleast_1d(np.asarray(x, dtype=float))
        if x.shape != (u.dim,) or not np.all(np.isfinite(x)):
            raise InputError("grid point must be a finite point of the base dimension")
        idx = tuple(int(v) for v in np.floor((x + u.radius) / u.spacing))
    if len(idx) != u.dim or any(not (0 <= i < u.n) for i in idx):
        raise InputError(f"grid point {x!r} is not a cell of the grid")
    return int(np.ravel_multi_index(idx, (u.n,) * u.dim))


def _operator(u, spec):
    spec = _as_spec(spec, spec.order if spec else None, u)
    return GraphOperator(u, spec)


def frac_laplacian(u: GraphFunction, spec: KernelSpec, x) -> float:
    """int (u(y') - u(x')) |y' - x'|^{-(n+2s)} dy' at a grid point."""
    op = _operator(u, spec)
    return float(op.frac_laplacian_rows(u.values, [_row_index(u, x)])[0])


def frac_laplacian_field(u: GraphFunction, spec: KernelSpec) -> np.ndarray:
    op = _operator(u, spec)
    return op.lap(u.values).reshape(u.values.shape)


def truncated_frac_laplacian(u: GraphFunction, spec: KernelSpec, x) -> float:
    if spec.truncation_radius is None:
        raise ConfigurationError("truncated operator needs a truncation radius")
    op = _operator(u, spec)
    return float(op.frac_laplacian_rows(u.values, [_row_index(u, x)],
                                        radius=spec.truncation_radius)[0])


def fractional_curvature_graph(u: GraphFunction, spec: KernelSpec, x) -> float:
    """K_E at (x', u(x')) for the subgraph E = {x_n < u(x')}."""
    op = _operator(u, spec)
    op.check_slope(u.values)
    return float(op.curvature_rows(u.values, [_row_index(u, x)])[0])


def fractional_curvature_graph_field(u: GraphFunction, spec: KernelSpec, rows=None) -> np.ndarray:
    op = _operator(u, spec)
    op.check_slope(u.values)
    if rows is None:
        return op.curvature_rows(u.values, np.arange(op.N)).reshape(u.values.shape)
    return op.curvature_rows(u.values, np.atleast_1d(rows))


def linearization_error(u: GraphFunction, spec: KernelSpec, x) -> float:
    """g(x') = 2 (frac. Laplacian of u)(x') - K_E(x', u(x'))."""
    op = _operator(u, spec)
    op.check_slope(u.values)
    i = [_row_index(u, x)]
    return float(2 * op.frac_laplacian_rows(u.values, i)[0] - op.curvature_rows(u.values, i)[0])


def linearization_error_field(u: GraphFunction, spec: KernelSpec) -> np.ndarray:
    op = _operator(u, spec)
    op.check_slope(u.values)
    rows = np.arange(op.N)
    g = 2 * op.frac_laplacian_rows(u.values, rows) - op.curvature_rows(u.values, rows)
    return g.reshape(u.values.shape)


# --------------------------------------------------------------------------
# set operators


def face_point(E: IndicatorGrid, x, max_dist=2.0):
    """Nearest grid face separating a cell of E from a cell of its complement.

    Returns (face centre, normal axis).  Raises if no such face lies within
    ``max_dist * h`` of x.
    """
    if not E.is_sharp:
        raise SharpnessError("set curvature needs a sharp indicator")
    x = np.asarray(x, dtype=float)
    h = E.spacing
    base = np.floor((x - E.lo) / h).astype(int)
    rng = np.arange(-3, 4)
    cand = np.stack(np.meshgrid(*([rng] * E.dim), indexing="ij"), -1).reshape(-1, E.dim) + base
    best = None
    shape = np.asarray(E.shape)
    for ax in range(E.dim):
        nb = cand.copy()
        nb[:, ax] += 1
        c1 = E.lo + h * (cand + 0.5)
        c2 = E.lo + h * (nb + 0.5)
        v1 = E.value_at(c1)
        v2 = E.value_at(c2)
        # at least one of the two cells must be inside the box
        inside = np.all((cand >= 0) & (cand < shape), -1) | np.all((nb >= 0) & (nb < shape), -1)
        ok = (v1 != v2) & inside
        if not np.any(ok):
            continue
        faces = 0.5 * (c1[ok] + c2[ok])
        dist = np.linalg.norm(faces - x, axis=-1)
        j = int(np.argmin(dist))
        if best is None or dist[j] < best[0] - 1e-14:
            best = (dist[j], faces[j], ax)
    if best is None or best[0] > max_dist * h:
        raise NotABoundaryPointError(f"no interface face within {max_dist}h of {x}")
    return best[1], best[2]


def _set_lattice(n, p, axis, near):
    """Dense lookup of near-field weights for half-offset cells around a face."""
    K = near + 1
    offs, W = Q.set_half_table(n, p, axis, K, near=near)
    dense = np.zeros((2 * K + 1,) * n)
    idx = np.rint(offs + K).astype(int)
    idx[:, axis] = np.rint(offs[:, axis] + K - 0.5).astype(int)
    dense[tuple(idx.T)] = W
    return dense, K


def exterior_sign_tail(rule, X, lo, hi, s, dirs=None, dw=None, r_start=None, r_stop=None):
    """Per point x in X: int over the box exterior, r in [r_start, r_stop] along rays
    from x, of (chi_E - chi_CE) r^{-1-2s}, where E is given by the exterior rule.

    Closed form in r for half-space, empty and full exteriors.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    n = X.shape[1]
    if dirs is None:
        dirs, dw = Q.sphere_rule(n, 1024 if n == 2 else 256)
    if rule.kind not in ("halfspace", "empty", "full"):
        raise UnsupportedExteriorError(f"no closed form for exterior {rule.kind!r}")
    if rule.kind == "halfspace":
        e = np.asarray(rule.normal, dtype=float)
        mu = dirs @ e
        siginf = np.where(mu != 0, -np.sign(mu), 0.0)

    def tail(start, c):
        # int_start^inf sigma(r) r^{-1-2s} dr for every (point, direction)
        if rule.kind == "empty":
            return -start ** (-2 * s) / (2 * s)
        if rule.kind == "full":
            return start ** (-2 * s) / (2 * s)
        sig0 = np.sign(c - start * mu)
        sig0 = np.where(sig0 == 0, -np.sign(mu), sig0)
        sinf = np.where(mu != 0, siginf, np.sign(c))
        with np.errstate(divide="ignore", invalid="ignore"):
            rstar = np.where(mu != 0, c / mu, np.inf)
        cross = (rstar > start) & np.isfinite(rstar)
        rs = np.where(cross, rstar, 1.0)
        return (sig0 * start ** (-2 * s) + (sinf - sig0) * rs ** (-2 * s) * cross) / (2 * s)

    out = np.empty(len(X))
    step = max(1, 2 ** 22 // len(dirs))
    for i in range(0, len(X), step):
        x = X[i:i + step]
        r0 = Q.ray_box_distance(x, dirs, lo, hi)
        a = r0 if r_start is None else np.maximum(r0, r_start)
        c = (rule.offset - x @ e)[:, None] if rule.kind == "halfspace" else None
        val = tail(a, c)
        if r_stop is not None:
            val = val - tail(np.maximum(a, r_stop), c)
        out[i:i + step] = val @ dw
    return out


def _exterior_sign_tail(rule, x0, lo, hi, dirs, dw, s, r_start=None, r_stop=None):
    return float(exterior_sign_tail(rule, x0[None, :], lo, hi, s, dirs, dw,
                                    r_start=r_start, r_stop=r_stop)[0])


def _set_context(E, spec, order=None):
    if E.dim not in (2, 3):
        raise InputError("set evaluators need dimension 2 or 3")
    if spec is None:
        raise ConfigurationError("kernel spec required")
    if abs(spec.spacing - E.spacing) > 1e-12 * E.spacing:
        raise ConfigurationError("kernel spec spacing does not match the grid")
    s = spec.order.s
    p = spec.order.kernel_exponent(E.dim)
    dirs, dw = Q.sphere_rule(E.dim, 1024 if E.dim == 2 else 256)
    return s, p, dirs, dw


def _grid_sum(E, spec, x0, axis, radius=None, exclude_ball=None):
    """h^{n-p} * sum_j (2 theta_j - 1) w_j over box cells, face-centred near field."""
    s, p, _, _ = _set_context(E, spec)
    h = E.spacing
    c = E.centers().reshape(-1, E.dim)
    z = (c - x0) / h
    sign = (2.0 * np.asarray(E.cells, dtype=float) - 1.0).reshape(-1)
    dist = np.sqrt(np.sum(z * z, axis=-1))
    with np.errstate(divide="ignore"):
        w = dist ** (-p)
    near = spec.near_cells
    if axis is not None:
        dense, K = _set_lattice(E.dim, p, axis, near)
        idx = np.rint(z + K).astype(int)
        idx[:, axis] = np.rint(z[:, axis] + K - 0.5).astype(int)
        inside = np.all((idx >= 0) & (idx < dense.shape[0]), axis=-1)
        inside &= np.max(np.abs(z), axis=-1) <= near + 0.5 + 1e-9
        w[inside] = dense[tuple(idx[inside].T)]
    if radius is not None:
        w = np.where(dist * h < radius, w, 0.0)
    if exclude_ball is not None:
        w = np.where(dist * h > exclude_ball, w, 0.0)
    return h ** (E.dim - p) * np.sum(sign * w)


def _check_margin(E, spec, x0):
    # the face-centred near-field stencil must see grid cells, not the exterior rule
    margin = float(np.min(np.minimum(x0 - E.lo, E.hi - x0)))
    if margin < (spec.near_cells + 0.5) * E.spacing - 1e-12:
        raise ResolutionError(f"boundary point {x0} is within the near field of the box edge")


def fractional_curvature_set(E: IndicatorGrid, spec: KernelSpec, x) -> float:
    """K_E(x) = PV int (chi_E - chi_CE) |y - x|^{-(n+2s)} dy at the face nearest to x."""
    s, p, dirs, dw = _set_context(E, spec)
    x0, axis = face_point(E, x)
    _check_margin(E, spec, x0)
    return _grid_sum(E, spec, x0, axis) + _exterior_sign_tail(E.exterior, x0, E.lo, E.hi,
                                                              dirs, dw, s)


def truncated_curvature(F: IndicatorGrid, spec: KernelSpec, x, r: float) -> float:
    """Principal value of (chi_F - chi_CF) |y - x|^{-(n+2s)} over B_r(x)."""
    if not r > 2 * F.spacing:
        raise ResolutionError(f"radius {r} is not above 2h = {2 * F.spacing}")
    s, p, dirs, dw = _set_context(F, spec)
    x0, axis = face_point(F, x)
    _check_margin(F, spec, x0)
    return (_grid_sum(F, spec, x0, axis, radius=r)
            + _exterior_sign_tail(F.exterior, x0, F.lo, F.hi, dirs, dw, s, r_stop=r))


def truncated_kernel_fE(E: IndicatorGrid, spec: KernelSpec, y) -> float:
    """f_E(y) = int_{|x - y| > r_T} (chi_CE - chi_E) |x - y|^{-(n+2s)} dx."""
    rT = spec.truncation_radius if spec.truncation_radius is not None else 0.25
    s, p, dirs, dw = _set_context(E, spec)
    y = np.asarray(y, dtype=float)
    if y.shape != (E.dim,) or not np.all(np.isfinite(y)):
        raise InputError("point has the wrong dimension")
    if np.any(y < E.lo) or np.any(y > E.hi):
        raise InputError("point must lie in the grid box")
    inner = _grid_sum(E, spec, y, None, exclude_ball=rT)
    outer = _exterior_sign_tail(E.exterior, y, E.lo, E.hi, dirs, dw, s, r_start=rT)
    return -(inner + outer)
