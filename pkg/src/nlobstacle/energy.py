"""Variational functionals: interactions, s-perimeter, perimeter, membranes energy."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from functools import cached_property, lru_cache
from typing import Optional

import numpy as np
from scipy import fft, ndimage

from . import _quadrature as Q
from .domain import FractionalOrder, GraphFunction, IndicatorGrid, format_real
from .errors import DivergenceError, InputError, SharpnessError
from .kernels import GraphOperator, KernelSpec, exterior_sign_tail

__all__ = [
    "EnergyBreakdown", "PairOperator", "SetEnergy", "interaction", "s_perimeter",
    "s_perimeter_terms", "perimeter", "graph_area", "graph_area_grad", "two_membranes_energy",
    "graph_quadratic_energy",
]


@dataclass(frozen=True)
class EnergyBreakdown:
    s_perimeter: float
    perimeter: float
    forcing_E: float
    forcing_F: float
    total: float = field(default=np.nan)

    def __post_init__(self):
        parts = self.s_perimeter + self.perimeter + self.forcing_E + self.forcing_F
        if np.isnan(self.total):
            object.__setattr__(self, "total", parts)
        elif abs(self.total - parts) > 1e-12 * max(1.0, abs(parts)):
            raise InputError("total does not match the sum of the parts")

    def to_record(self) -> str:
        return "".join(f"{k}={format_real(v)}\n" for k, v in asdict(self).items())

    @classmethod
    def from_record(cls, text: str) -> "EnergyBreakdown":
        vals = dict(line.split("=", 1) for line in text.strip().splitlines())
        return cls(**{k: float(v) for k, v in vals.items()})


# --------------------------------------------------------------------------
# cell-pair interactions


class PairOperator:
    """Convolution with the exact cell-pair table on a fixed grid shape.

    ``apply(x)[i] = sum_{j != i} P(i - j) x_j`` scaled to physical units
    (h^{2n-p}); the diagonal is excluded.
    """

    def __init__(self, shape, spacing: float, order: FractionalOrder):
        self.shape = tuple(shape)
        self.n = len(shape)
        self.h = spacing
        self.p = order.kernel_exponent(self.n)
        K = max(self.shape) - 1
        T = Q.pair_table(self.n, self.p, K).copy()
        T[(K,) * self.n] = 0.0
        T *= spacing ** (2 * self.n - self.p)
        # crop to the offsets reachable within this shape
        sl = tuple(slice(K - (m - 1), K + m) for m in self.shape)
        self.table = T[sl]
        self._fshape = [fft.next_fast_len(2 * m - 1 + m - 1, real=True) for m in self.shape]
        self._ft = fft.rfftn(self.table, self._fshape)

    def apply(self, x):
        x = np.asarray(x, dtype=float)
        y = fft.irfftn(fft.rfftn(x, self._fshape) * self._ft, self._fshape)
        sl = tuple(slice(m - 1, 2 * m - 1) for m in self.shape)
        return y[sl]

    def bilinear(self, a, b):
        """Symmetrized sum_i sum_{j != i} a_i b_j P(i - j)."""
        return 0.5 * (float(np.sum(a * self.apply(b))) + float(np.sum(b * self.apply(a))))


_pair_cache: dict = {}


def _pairs(shape, spacing, order) -> PairOperator:
    key = (tuple(shape), float(spacing), float(order.s))
    op = _pair_cache.get(key)
    if op is None:
        if len(_pair_cache) > 16:
            _pair_cache.clear()
        op = _pair_cache[key] = PairOperator(shape, spacing, order)
    return op


def _rule_coverage(rule, lo, spacing, shape, sub: int = 4) -> np.ndarray:
    """Fraction of each virtual cell inside the rule (exact 0/1 for cells clear of the plane)."""
    n = len(shape)
    axes = [lo[a] + spacing * (np.arange(m) + 0.5) for a, m in enumerate(shape)]
    C = np.stack(np.meshgrid(*axes, indexing="ij"), -1)
    if rule.kind == "full":
        return np.ones(shape)
    e = np.asarray(rule.normal)
    dist = C @ e - rule.offset
    cov = (dist < 0).astype(float)
    cut = np.abs(dist) < 0.5 * spacing * np.sum(np.abs(e)) - 1e-12 * spacing
    if np.any(cut):
        t = (np.arange(sub) + 0.5) / sub - 0.5
        offs = np.stack(np.meshgrid(*([t] * n), indexing="ij"), -1).reshape(-1, n) * spacing
        pts = C[cut][:, None, :] + offs[None]
        cov[cut] = np.mean(pts @ e < rule.offset, axis=-1)
    return cov


def _arc_rule(x, lo, hi, rule, m: int = 24):
    """Per-point direction rules on the circle, split at the kinks of the ray integrand."""
    P = len(x)
    corners = np.array([[lo[0], lo[1]], [hi[0], lo[1]], [hi[0], hi[1]], [lo[0], hi[1]]])
    ang = [np.arctan2(corners[:, 1] - x[:, 1, None], corners[:, 0] - x[:, 0, None])]
    if rule.kind == "halfspace":
        e = np.asarray(rule.normal)
        par = np.arctan2(e[0], -e[1])
        ang.append(np.full((P, 2), par) + np.array([0.0, np.pi]))
        # where the plane meets the box boundary
        pts = []
        for axis in range(2):
            for bound in (lo[axis], hi[axis]):
                other = 1 - axis
                if abs(e[other]) > 1e-14:
                    t = (rule.offset - e[axis] * bound) / e[other]
                    if lo[other] <= t <= hi[other]:
                        q = np.zeros(2)
                        q[axis], q[other] = bound, t
                        pts.append(q)
        if pts:
            pts = np.array(pts)
            ang.append(np.arctan2(pts[None, :, 1] - x[:, 1, None], pts[None, :, 0] - x[:, 0, None]))
    A = np.sort(np.mod(np.concatenate(ang, axis=1), 2 * np.pi), axis=1)
    A = np.concatenate([A, A[:, :1] + 2 * np.pi], axis=1)
    g, w = np.polynomial.legendre.leggauss(m)
    a0, a1 = A[:, :-1, None], A[:, 1:, None]
    th = (0.5 * (a1 - a0) * g + 0.5 * (a1 + a0)).reshape(P, -1)
    wt = (0.5 * (a1 - a0) * w).reshape(P, -1)
    return np.stack([np.cos(th), np.sin(th)], -1), wt


def _ray_tail_2d(rule, x, lo, hi, s):
    """int over the complement of the box [lo, hi], inside the rule, of |x - y|^{-2-2s} dy."""
    out = np.empty(len(x))
    for i in range(0, len(x), 4096):
        xs = x[i:i + 4096]
        dirs, wt = _arc_rule(xs, lo, hi, rule)
        with np.errstate(divide="ignore", invalid="ignore"):
            tp = np.where(dirs > 0, (np.asarray(hi) - xs[:, None, :]) / dirs, np.inf)
            tm = np.where(dirs < 0, (np.asarray(lo) - xs[:, None, :]) / dirs, np.inf)
        r0 = np.min(np.minimum(tp, tm), axis=-1)
        if rule.kind == "full":
            val = r0 ** (-2 * s) / (2 * s)
        else:
            e = np.asarray(rule.normal)
            mu = dirs @ e
            c = (rule.offset - xs @ e)[:, None]
            # the ray is inside the rule for r with c - r mu > 0
            with np.errstate(divide="ignore", invalid="ignore"):
                rstar = np.where(mu != 0, c / mu, np.inf)
            in0 = c - r0 * mu > 0
            grows = mu < 0
            a = np.where(in0, r0, np.where(grows & (rstar > r0), rstar, np.inf))
            b = np.where(in0 & (mu > 0) & (rstar > r0), rstar, np.inf)
            with np.errstate(divide="ignore"):
                val = (a ** (-2 * s) - np.where(np.isfinite(b), b ** (-2 * s), 0.0)) / (2 * s)
            val = np.where(np.isfinite(a), val, 0.0)
        out[i:i + 4096] = np.sum(val * wt, axis=1)
    return out


def _ray_tail_nd(rule, x, lo, hi, s):
    dirs, dw = Q.sphere_rule(len(lo), 256)
    full = np.empty(len(x))
    step = max(1, 2 ** 21 // len(dirs))
    for i in range(0, len(x), step):
        r0 = Q.ray_box_distance(x[i:i + step], dirs, lo, hi)
        full[i:i + step] = (r0 ** (-2 * s) / (2 * s)) @ dw
    if rule.kind == "full":
        return full
    return 0.5 * (full + exterior_sign_tail(rule, x, lo, hi, s, dirs, dw))


def exterior_potential(rule, E: IndicatorGrid, order: FractionalOrder) -> np.ndarray:
    """Cell averages of int_{ext, rule} |x - y|^{-(n+2s)} dy over the box exterior.

    A band of virtual cells around the box is summed with the exact cell-pair
    table (cells cut by a tilted plane count with their covered fraction);
    beyond the band a ray integral is averaged over each cell by Gauss points.
    """
    s = order.s
    n = E.dim
    if rule.kind == "empty":
        return np.zeros(E.shape)
    h = E.spacing
    m = max(E.shape)
    R = max(m, 32) if n == 2 else max(m // 2, 8)
    shape = tuple(k + 2 * R for k in E.shape)
    lo_ext = E.lo - R * h
    cov = _rule_coverage(rule, lo_ext, h, shape)
    cov[tuple(slice(R, R + k) for k in E.shape)] = 0.0
    K = max(shape) - 1
    p = order.kernel_exponent(n)
    T = _pair_table_cached(n, p, K)
    fshape = [fft.next_fast_len(a + 2 * K + 1, real=True) for a in shape]
    conv = fft.irfftn(fft.rfftn(cov, fshape) * fft.rfftn(T, fshape), fshape)
    near = conv[tuple(slice(K + R, K + R + k) for k in E.shape)] * h ** (n - p)
    hi_ext = E.hi + R * h
    x, w = np.polynomial.legendre.leggauss(4)
    off = np.stack(np.meshgrid(*([x] * n), indexing="ij"), -1).reshape(-1, n) * 0.5 * h
    ww = np.prod(np.stack(np.meshgrid(*([w] * n), indexing="ij"), -1).reshape(-1, n), -1) / 2 ** n
    C = E.centers().reshape(-1, n)
    pts = (C[:, None, :] + off[None]).reshape(-1, n)
    tail = _ray_tail_2d if n == 2 else _ray_tail_nd
    far = tail(rule, pts, lo_ext, hi_ext, s).reshape(-1, len(ww)) @ ww
    return near + far.reshape(E.shape)


@lru_cache(maxsize=8)
def _pair_table_cached(n, p, K):
    T = Q.pair_table(n, p, K).copy()
    T[(K,) * n] = 0.0
    return T


def _window_mask(E: IndicatorGrid, window) -> np.ndarray:
    if window is None:
        return np.ones(E.shape, dtype=bool)
    lo, hi = (np.asarray(v, dtype=float) for v in window)
    if lo.shape != (E.dim,) or hi.shape != (E.dim,):
        raise InputError("window has the wrong dimension")
    tol = 1e-9 * E.spacing
    if np.any(lo < E.lo - tol) or np.any(hi > E.hi + tol) or np.any(hi <= lo):
        raise InputError("window must lie inside the grid box")
    C = E.centers()
    return np.all((C > lo) & (C < hi), axis=-1)


def interaction(A: IndicatorGrid, B: IndicatorGrid, order: FractionalOrder, window=None) -> float:
    """L(A, B) = int_A int_B |x - y|^{-(n+2s)} for relaxed indicators.

    Grid cells are restricted to ``window``; the exterior of each set
    interacts with the other's window cells.  Pairs with both points outside
    the box are not counted.
    """
    if not A.compatible(B):
        raise InputError("interaction needs compatible grids")
    mask = _window_mask(A, window)
    a = np.where(mask, A.cells, 0.0)
    b = np.where(mask, B.cells, 0.0)
    if np.any(a * b > 0):
        raise DivergenceError("sets overlap; the interaction diverges")
    P = _pairs(A.shape, A.spacing, order)
    val = P.bilinear(a, b)
    hn = A.spacing ** A.dim
    if B.exterior.kind != "empty" and np.any(a):
        val += hn * float(np.sum(a * exterior_potential(B.exterior, A, order)))
    if A.exterior.kind != "empty" and np.any(b):
        val += hn * float(np.sum(b * exterior_potential(A.exterior, A, order)))
    return val


class SetEnergy:
    """Relaxed s-perimeter in a box window, for a fixed grid and exterior.

    E(theta) = L(E cap Omega, CE) + L(E minus Omega, CE cap Omega) with
    chi_E(x) chi_CE(y) replaced by theta(x)(1 - theta(y)) and the diagonal
    (self-cell) pairs omitted.  The energy is affine in every theta_i.
    """

    def __init__(self, template: IndicatorGrid, order: FractionalOrder, window=None):
        self.template = template
        self.order = order
        self.omega = _window_mask(template, window)
        self.pairs = _pairs(template.shape, template.spacing, order)
        self.hn = template.spacing ** template.dim

    @cached_property
    def phi_E(self):
        return exterior_potential(self.template.exterior, self.template, self.order)

    @cached_property
    def phi_CE(self):
        return exterior_potential(self.template.exterior.complement(), self.template, self.order)

    def terms(self, theta):
        th = np.asarray(theta, dtype=float)
        om = self.omega
        c = 1.0 - th
        P = self.pairs
        t1 = P.bilinear(np.where(om, th, 0.0), c) + self.hn * float(np.sum(th[om] * self.phi_CE[om]))
        t2 = (P.bilinear(np.where(om, 0.0, th), np.where(om, c, 0.0))
              + self.hn * float(np.sum(c[om] * self.phi_E[om])))
        return t1, t2

    def energy(self, theta) -> float:
        t1, t2 = self.terms(theta)
        return t1 + t2

    def gradient(self, theta) -> np.ndarray:
        """d energy / d theta_k for cells in the window (zero elsewhere)."""
        th = np.asarray(theta, dtype=float)
        g = self.pairs.apply(1.0 - 2.0 * th) + self.hn * (self.phi_CE - self.phi_E)
        return np.where(self.omega, g, 0.0)


def s_perimeter_terms(E: IndicatorGrid, window, order: FractionalOrder):
    """(L(E cap Omega, CE), L(E minus Omega, CE cap Omega))."""
    return SetEnergy(E, order, window).terms(E.cells)


def s_perimeter(E: IndicatorGrid, window, order: FractionalOrder) -> float:
    t1, t2 = s_perimeter_terms(E, window, order)
    return t1 + t2


# --------------------------------------------------------------------------
# classical perimeter


def _padded_graph(v: GraphFunction) -> np.ndarray:
    h, n, R = v.spacing, v.n, v.radius
    ax = -R + h * (np.arange(-1, n + 1) + 0.5)
    if v.dim == 1:
        pts = ax[:, None]
    else:
        X, Y = np.meshgrid(ax, ax, indexing="ij")
        pts = np.stack([X, Y], -1)
    P = v.exterior(pts)
    P[(slice(1, -1),) * v.dim] = v.values
    return P


def _edge_weights(n):
    w = np.ones(n + 1)
    w[0] = w[-1] = 0.5
    return w


def graph_area(v: GraphFunction) -> float:
    """Area of the piecewise-linear interpolant through the cell centres.

    Cells are joined to the exterior ring; boundary strips count with weight
    1/2 (corners 1/4) so a flat graph has area |box| and planes are exact.
    """
    return _area(v, grad=False)


def graph_area_grad(v: GraphFunction) -> np.ndarray:
    return _area(v, grad=True)


def _area(v: GraphFunction, grad: bool):
    P = _padded_graph(v)
    h = v.spacing
    n = v.n
    w = _edge_weights(n)
    if v.dim == 1:
        q = np.diff(P) / h
        root = np.sqrt(1 + q * q)
        if not grad:
            return float(np.sum(w * h * root))
        dq = w * q / root
        G = np.zeros_like(P)
        G[1:] += dq
        G[:-1] -= dq
        return G[1:-1]
    W = np.outer(w, w)
    u00, u10 = P[:-1, :-1], P[1:, :-1]
    u01, u11 = P[:-1, 1:], P[1:, 1:]
    # four triangles: both diagonals of every square, averaged
    tris = [
        ((u10 - u00) / h, (u11 - u10) / h, ((1, 0), (0, 0)), ((1, 1), (1, 0))),
        ((u11 - u01) / h, (u01 - u00) / h, ((1, 1), (0, 1)), ((0, 1), (0, 0))),
        ((u10 - u00) / h, (u01 - u00) / h, ((1, 0), (0, 0)), ((0, 1), (0, 0))),
        ((u11 - u01) / h, (u11 - u10) / h, ((1, 1), (0, 1)), ((1, 1), (1, 0))),
    ]
    if not grad:
        return float(sum(np.sum(W * np.sqrt(1 + gx * gx + gy * gy)) for gx, gy, _, _ in tris)
                     * h * h / 4)
    G = np.zeros_like(P)
    m = n + 1

    def add(corner, val):
        i, j = corner
        G[i:i + m, j:j + m] += val

    for gx, gy, (ax, bx), (ay, by) in tris:
        root = np.sqrt(1 + gx * gx + gy * gy)
        cx = W * gx / root * h / 4
        cy = W * gy / root * h / 4
        add(ax, cx)
        add(bx, -cx)
        add(ay, cy)
        add(by, -cy)
    return G[1:-1, 1:-1]


def perimeter(F, window=None, relaxed: bool = False) -> float:
    """Per(F) in the window: graph area for graphs, mollified total variation for sets."""
    if isinstance(F, GraphFunction):
        if window is not None:
            lo, hi = (np.asarray(x, dtype=float).reshape(-1) for x in window)
            if not (np.allclose(lo, -F.radius) and np.allclose(hi, F.radius)):
                raise InputError("graph perimeter is taken over the whole grid box")
        return graph_area(F)
    if not isinstance(F, IndicatorGrid):
        raise InputError("perimeter expects a GraphFunction or an IndicatorGrid")
    if not F.is_sharp and not relaxed:
        raise SharpnessError("perimeter of a relaxed indicator needs relaxed=True")
    mask = _window_mask(F, window)
    h = F.spacing
    ext = F.exterior
    pad = 2
    axes = [F.lo[a] + h * (np.arange(-pad, F.shape[a] + pad) + 0.5) for a in range(F.dim)]
    pts = np.stack(np.meshgrid(*axes, indexing="ij"), -1)
    full = ext(pts).astype(float)
    full[(slice(pad, -pad),) * F.dim] = F.cells
    sm = ndimage.uniform_filter(full, size=3, mode="nearest")
    grads = np.gradient(sm, h)
    mag = np.sqrt(sum(g * g for g in grads))[(slice(pad, -pad),) * F.dim]
    return float(np.sum(mag[mask]) * h ** F.dim)


# --------------------------------------------------------------------------
# graph energies


def graph_quadratic_energy(u: GraphFunction, order: FractionalOrder, spec: Optional[KernelSpec] = None,
                           operator: Optional[GraphOperator] = None) -> float:
    """J_s(u) = 1/4 iint_{not both exterior} (u(x') - u(y'))^2 |x' - y'|^{-(n+2s)}, constants dropped."""
    op = operator or GraphOperator(u, spec or KernelSpec(order, u.spacing))
    return op.Js(u.values)


def two_membranes_energy(u: GraphFunction, v: GraphFunction, f: GraphFunction, g: GraphFunction,
                         order: FractionalOrder, window=None, mode: str = "quadratic",
                         spec: Optional[KernelSpec] = None) -> EnergyBreakdown:
    """Energy of the subgraph pair (u, v).

    ``mode='quadratic'`` uses the quadratic model 2 J_s(u) of the s-perimeter
    excess, ``mode='exact'`` the column-integrated nonlinear s-perimeter
    excess of the subgraph of u (both relative to the flat interior u = 0).
    """
    grids = [(w.dim, w.n, w.spacing, w.radius) for w in (u, v, f, g)]
    if any(gr != grids[0] for gr in grids):
        raise InputError("u, v, f and g must share one grid")
    if window is not None:
        lo, hi = (np.asarray(x, dtype=float).reshape(-1) for x in window)
        if not (np.allclose(lo, -u.radius) and np.allclose(hi, u.radius)):
            raise InputError("the membranes energy is taken over the whole grid box")
    op = GraphOperator(u, spec or KernelSpec(order, u.spacing))
    if mode == "quadratic":
        s_term = 2.0 * op.Js(u.values)
    elif mode == "exact":
        s_term = op.pgraph(u.values)
    else:
        raise InputError(f"unknown mode {mode!r}")
    hd = u.spacing ** u.dim
    return EnergyBreakdown(
        s_perimeter=float(s_term),
        perimeter=graph_area(v),
        forcing_E=float(hd * np.sum(f.values * u.values)),
        forcing_F=float(hd * np.sum(g.values * v.values)),
    )
