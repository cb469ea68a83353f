"""Quadrature primitives shared by the kernel and energy modules.

Conventions: kernels are unnormalized, ``|z|^{-p}`` with ``p = n + 2s``.  Lattice
tables are returned in unit-spacing form; callers scale them by ``h^{d-p}``
(single integrals) or ``h^{2n-p}`` (cell-pair integrals).
"""
from __future__ import annotations

import itertools
from functools import lru_cache

import numpy as np
from scipy import integrate, special

# --------------------------------------------------------------------------
# column integrals for subgraphs


def col_F(q, p):
    """F(q) = int_0^q (1 + t^2)^(-p/2) dt, odd in q."""
    q = np.asarray(q, dtype=float)
    b = 0.5 * (p - 1.0)
    w = q * q / (1.0 + q * q)
    return np.sign(q) * 0.5 * special.beta(0.5, b) * special.betainc(0.5, b, w)


def col_Fprime(q, p):
    return (1.0 + np.asarray(q, dtype=float) ** 2) ** (-0.5 * p)


def col_psi(q, p):
    """psi(q) with psi' = 2F, psi(0) = 0; psi(q) ~ q^2 near 0."""
    q = np.asarray(q, dtype=float)
    tail = -np.expm1((1.0 - 0.5 * p) * np.log1p(q * q))  # 1 - (1+q^2)^(1-p/2)
    return 2.0 * q * col_F(q, p) - 2.0 * tail / (p - 2.0)


def G_hat(rho, a, p):
    """rho^p * int_0^a (rho^2 + t^2)^(-p/2) dt = rho F(a/rho)."""
    return rho * col_F(a / rho, p)


def Psi_hat(rho, a, p):
    """rho^p * Psi(rho, a), with d/da Psi_hat = 2 G_hat."""
    return rho * rho * col_psi(a / rho, p)


# --------------------------------------------------------------------------
# radial Gauss-Jacobi rule for exterior tails


@lru_cache(maxsize=None)
def tail_rule(beta: float, m: int = 48):
    """Nodes/weights on (0, 1] for int_0^1 t^beta f(t) dt, beta > -1."""
    x, w = special.roots_jacobi(m, 0.0, beta)
    t = 0.5 * (1.0 + x)
    return t, w * 0.5 ** (beta + 1.0)


@lru_cache(maxsize=None)
def sphere_rule(d: int, resolution: int = 1024):
    """Directions and weights on S^{d-1}; weights sum to the sphere area."""
    if d == 1:
        return np.array([[1.0], [-1.0]]), np.array([1.0, 1.0])
    if d == 2:
        th = (np.arange(resolution) + 0.5) * (2 * np.pi / resolution)
        dirs = np.stack([np.cos(th), np.sin(th)], axis=-1)
        return dirs, np.full(resolution, 2 * np.pi / resolution)
    if d == 3:
        nmu = max(16, resolution // 8)
        npsi = 2 * nmu
        mu, wmu = np.polynomial.legendre.leggauss(nmu)
        psi = (np.arange(npsi) + 0.5) * (2 * np.pi / npsi)
        M, P = np.meshgrid(mu, psi, indexing="ij")
        st = np.sqrt(1 - M ** 2)
        dirs = np.stack([st * np.cos(P), st * np.sin(P), M], axis=-1).reshape(-1, 3)
        w = np.repeat(wmu, npsi) * (2 * np.pi / npsi)
        return dirs, w
    raise ValueError(d)


def ray_box_distance(x, dirs, lo, hi):
    """Distance from points x (P, d) inside the box to its boundary along dirs (D, d)."""
    x = np.asarray(x, dtype=float)[:, None, :]
    dv = np.asarray(dirs, dtype=float)[None, :, :]
    with np.errstate(divide="ignore", invalid="ignore"):
        tp = np.where(dv > 0, (np.asarray(hi) - x) / dv, np.inf)
        tm = np.where(dv < 0, (np.asarray(lo) - x) / dv, np.inf)
    return np.min(np.minimum(tp, tm), axis=-1)


def sphere_area(d: int) -> float:
    return 2 * np.pi ** (d / 2) / special.gamma(d / 2)


# --------------------------------------------------------------------------
# tensor Gauss-Legendre on boxes


@lru_cache(maxsize=None)
def _gl_box_nodes(d: int, order: int, sub: int):
    x, w = np.polynomial.legendre.leggauss(order)
    x = 0.5 * x
    w = 0.5 * w
    # subdivide [-1/2, 1/2] into `sub` pieces
    cs = -0.5 + (np.arange(sub) + 0.5) / sub
    x1 = (cs[:, None] + x[None, :] / sub).ravel()
    w1 = np.tile(w / sub, sub)
    grids = np.meshgrid(*([x1] * d), indexing="ij")
    wg = np.meshgrid(*([w1] * d), indexing="ij")
    nodes = np.stack([g.ravel() for g in grids], axis=-1)
    weights = np.prod(np.stack([g.ravel() for g in wg], axis=-1), axis=-1)
    return nodes, weights


def unit_cell_kernel_integrals(centers, p, order=8, sub=1, chunk=4096):
    """int over unit cells centred at `centers` (B, d) of |z|^{-p}."""
    centers = np.atleast_2d(np.asarray(centers, dtype=float))
    nodes, w = _gl_box_nodes(centers.shape[1], order, sub)
    out = np.empty(len(centers))
    for i in range(0, len(centers), chunk):
        z = centers[i:i + chunk, None, :] + nodes[None, :, :]
        r2 = np.sum(z * z, axis=-1)
        out[i:i + chunk] = (r2 ** (-0.5 * p)) @ w
    return out


# --------------------------------------------------------------------------
# graph lattice tables (integer offsets, unit spacing)


def _offsets(d, K):
    rng = np.arange(-K, K + 1)
    grids = np.meshgrid(*([rng] * d), indexing="ij")
    return np.stack([g.ravel() for g in grids], axis=-1).astype(float)


@lru_cache(maxsize=64)
def graph_cell_table(d: int, p: float, K: int, near: int = 8) -> np.ndarray:
    """W[k] = int_{unit cell at k} |z|^{-p}, k in [-K, K]^d; W[0] = 0.

    Cells with |k|_inf <= near use Gauss-Legendre, the rest the midpoint rule.
    """
    if d == 1:
        k = np.arange(-K, K + 1, dtype=float)
        a = np.abs(k)
        with np.errstate(divide="ignore", invalid="ignore"):
            W = ((a - 0.5) ** (1 - p) - (a + 0.5) ** (1 - p)) / (p - 1)
        W[K] = 0.0
        return W
    offs = _offsets(d, K)
    linf = np.max(np.abs(offs), axis=-1)
    W = np.empty(len(offs))
    far = linf > near
    with np.errstate(divide="ignore"):
        W[far] = np.sum(offs[far] ** 2, axis=-1) ** (-0.5 * p)
    m1 = (linf >= 1) & (linf <= 2)
    m2 = (linf > 2) & (linf <= near)
    W[m1] = unit_cell_kernel_integrals(offs[m1], p, order=8, sub=8)
    W[m2] = unit_cell_kernel_integrals(offs[m2], p, order=8, sub=2)
    W[linf == 0] = 0.0
    return W.reshape((2 * K + 1,) * d)


def _polar_box_annulus(d, p, a_in, a_out):
    """int over [-a_out, a_out]^d minus [-a_in, a_in]^d of |z|^{-p}."""
    if d == 1:
        return 2 * (a_in ** (1 - p) - a_out ** (1 - p)) / (p - 1)
    if d == 2:
        f = lambda th: ((a_in / np.cos(th)) ** (2 - p) - (a_out / np.cos(th)) ** (2 - p)) / (p - 2)
        val, _ = integrate.quad(f, 0, np.pi / 4, epsabs=0, epsrel=1e-13, limit=200)
        return 8 * val
    raise ValueError(d)


def ring_mass_check(d: int, p: float, K: int) -> tuple[float, float]:
    """(table sum, analytic mass) over the near-field ring 0 < |k|_inf <= K."""
    W = graph_cell_table(d, p, K, near=K)
    return float(np.sum(W)), float(_polar_box_annulus(d, p, 0.5, K + 0.5))


@lru_cache(maxsize=None)
def self_cell_moment(d: int, p: float) -> float:
    """S = int_{[-1/2,1/2]^d} z_1^2 |z|^{-p} dz (finite since p < d + 2)."""
    if d == 1:
        return 2 * 0.5 ** (3 - p) / (3 - p)
    if d == 2:
        # S = 1/2 int |z|^{2-p} = 1/2 * 8 int_0^{pi/4} r(th)^{4-p}/(4-p)
        f = lambda th: (0.5 / np.cos(th)) ** (4 - p) / (4 - p)
        val, _ = integrate.quad(f, 0, np.pi / 4, epsabs=0, epsrel=1e-13)
        return 4 * val
    raise ValueError(d)


@lru_cache(maxsize=None)
def self_cell_directional(p: float, nth: int = 256):
    """2D: directions theta and weights r(theta)^{4-p}/(4-p) dtheta over the unit cell."""
    th = (np.arange(nth) + 0.5) * (2 * np.pi / nth)
    c, s = np.cos(th), np.sin(th)
    r = 0.5 / np.maximum(np.abs(c), np.abs(s))
    return np.stack([c, s], axis=-1), r ** (4 - p) / (4 - p) * (2 * np.pi / nth)


# --------------------------------------------------------------------------
# set lattice tables (half-integer offset along one axis, unit spacing)


@lru_cache(maxsize=32)
def set_half_table(n: int, p: float, axis: int, K: int, near: int = 8):
    """(offsets, weights) for cells centred at k + e_axis/2, |k|_inf <= K.

    The two cells sharing the face through the origin are excluded.
    """
    offs = _offsets(n, K)
    offs = offs[offs[:, axis] < K]  # keep a symmetric set in the half axis
    offs[:, axis] += 0.5
    rest = np.delete(offs, axis, axis=1)
    touching = np.all(rest == 0, axis=-1) & (np.abs(offs[:, axis]) == 0.5)
    offs = offs[~touching]
    linf = np.max(np.abs(offs), axis=-1)
    W = np.empty(len(offs))
    far = linf > near
    W[far] = np.sum(offs[far] ** 2, axis=-1) ** (-0.5 * p)
    m1 = linf <= 2.5
    m2 = (linf > 2.5) & ~far
    W[m1] = unit_cell_kernel_integrals(offs[m1], p, order=8, sub=8)
    W[m2] = unit_cell_kernel_integrals(offs[m2], p, order=8, sub=2)
    return offs, W


# --------------------------------------------------------------------------
# cell-pair integrals: P(k) = int int_{unit cells at 0 and k} |x - y|^{-p}
#                          = int_{[-1,1]^n} prod(1 - |t_a|) |t + k|^{-p} dt


def _duffy_corner(fun, corner, signs, lengths, beta, order=12, face_order=12):
    """Integrate fun over the box with a singular corner.

    fun(x) is assumed to behave like lambda^beta * smooth along rays from the
    corner (after including the radial Jacobian).  The box is split into one
    pyramid per far face.
    """
    n = len(corner)
    lam, wl = tail_rule(beta, order)
    xg, wg = np.polynomial.legendre.leggauss(face_order)
    xg = 0.5 * (xg + 1)
    wg = 0.5 * wg
    total = 0.0
    for a in range(n):
        others = [b for b in range(n) if b != a]
        grids = np.meshgrid(*([xg] * (n - 1)), indexing="ij")
        wgrid = np.meshgrid(*([wg] * (n - 1)), indexing="ij")
        y = np.zeros((grids[0].size, n))
        wy = np.ones(grids[0].size)
        for j, b in enumerate(others):
            y[:, b] = grids[j].ravel() * lengths[b]
            wy = wy * wgrid[j].ravel() * lengths[b]
        y[:, a] = lengths[a]
        # x = corner + signs * lam * y ; dx = lam^{n-1} * A_a dlam dy
        pts = corner[None, None, :] + signs[None, None, :] * lam[:, None, None] * y[None, :, :]
        vals = fun(pts) * lam[:, None] ** (n - 1 - beta) * lengths[a]
        total += float(wl @ vals @ wy)
    return total


def _tent_integrand(k, p):
    k = np.asarray(k, dtype=float)

    def fun(t):
        wgt = np.prod(1.0 - np.abs(t), axis=-1)
        r2 = np.sum((t + k) ** 2, axis=-1)
        with np.errstate(divide="ignore", invalid="ignore"):
            out = wgt * r2 ** (-0.5 * p)
        return np.where(r2 > 0, out, 0.0)
    return fun


def pair_integral_near(k, p):
    """Accurate P(k) for a single offset, singular corners by Duffy transform."""
    k = np.asarray(k, dtype=float)
    n = len(k)
    fun = _tent_integrand(k, p)
    total = 0.0
    for signs in itertools.product((-1.0, 1.0), repeat=n):
        signs = np.asarray(signs)
        # orthant box t_a in [0, signs_a]
        sing = all((k[a] == 0) or (-k[a] == signs[a]) for a in range(n)) and np.max(np.abs(k)) <= 1
        if sing:
            corner = -k
            dirs = np.where(k == 0, signs, -signs)
            lengths = np.ones(n)
            m = int(np.sum(k != 0))
            # weight vanishes linearly in each axis where k_a != 0
            beta = n - 1 - p + m
            total += _duffy_corner(fun, corner, dirs, lengths, beta)
        else:
            nodes, w = _gl_box_nodes(n, 10, 4 if np.max(np.abs(k)) <= 3 else 1)
            pts = 0.5 * signs + nodes * 1.0  # unit box centred at signs/2
            total += float(fun(pts) @ w)
    return total


@lru_cache(maxsize=32)
def pair_table(n: int, p: float, K: int, near: int = 3) -> np.ndarray:
    """P(k) for k in [-K, K]^n (P(0) = inf is stored as nan)."""
    offs = _offsets(n, K)
    linf = np.max(np.abs(offs), axis=-1)
    P = np.empty(len(offs))
    far = linf > near
    # far: Gauss-Legendre on each orthant of the tent (smooth integrand)
    order = 5 if n == 2 else 4
    nodes, w = _gl_box_nodes(n, order, 1)
    tent_pts = []
    tent_w = []
    for signs in itertools.product((-1.0, 1.0), repeat=n):
        pts = 0.5 * np.asarray(signs) + nodes
        tent_pts.append(pts)
        tent_w.append(w * np.prod(1 - np.abs(pts), axis=-1))
    tp = np.concatenate(tent_pts)
    tw = np.concatenate(tent_w)
    idx = np.flatnonzero(far)
    for i in range(0, len(idx), 2048):
        sel = idx[i:i + 2048]
        z = offs[sel, None, :] + tp[None, :, :]
        P[sel] = (np.sum(z * z, axis=-1) ** (-0.5 * p)) @ tw
    # near: exact-ish per offset, exploiting reflection symmetry
    cache = {}
    for i in np.flatnonzero(~far):
        k = offs[i]
        if not np.any(k):
            P[i] = np.nan
            continue
        key = tuple(sorted(np.abs(k)))
        if key not in cache:
            cache[key] = pair_integral_near(np.array(key), p)
        P[i] = cache[key]
    return P.reshape((2 * K + 1,) * n)
