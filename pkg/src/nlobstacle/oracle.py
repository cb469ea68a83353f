"""Brute-force references: dense quadrature, exhaustive minimizers, difference checks.

Nothing here uses the kernel tables of the main code path.  Cell-pair
integrals are computed from the tent autocorrelation of two cells, split into
boxes with a corner at the kernel singularity; each such box is cut into
pyramids where the radial integral is done in closed form.
"""
from __future__ import annotations

import itertools
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from math import gamma, pi
from typing import Callable, Optional, Sequence

import numpy as np

from .domain import (ExteriorSpec, FractionalOrder, GraphFunction, IndicatorGrid, Obstacle,
                     format_real)
from .errors import DivergenceError, InputError, OracleRefusal
from .kernels import GraphOperator, KernelSpec

__all__ = ["OracleReport", "dense_interaction", "exhaustive_set_min", "exhaustive_active_set",
           "fd_gradient_check", "cell_pair_integral", "cell_self_perimeter"]

PAIR_BUDGET = 10 ** 9


@dataclass(frozen=True)
class OracleReport:
    value: float
    method: str
    resolution: float
    estimated_error: float = 0.0
    extra: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if not self.method:
            raise InputError("oracle method tag must be non-empty")
        if not self.estimated_error >= 0:
            raise InputError("estimated error must be nonnegative")

    def to_record(self) -> str:
        out = []
        for k in ("value", "method", "resolution", "estimated_error"):
            v = getattr(self, k)
            out.append(f"{k}={format_real(v) if isinstance(v, float) else v}\n")
        return "".join(out)

    @classmethod
    def from_record(cls, text: str) -> "OracleReport":
        vals = dict(line.split("=", 1) for line in text.strip().splitlines())
        return cls(float(vals["value"]), vals["method"], float(vals["resolution"]),
                   float(vals["estimated_error"]))


# --------------------------------------------------------------------------
# exact cell-pair integrals (unit cells)


def _gl(a, b, m):
    x, w = np.polynomial.legendre.leggauss(m)
    return 0.5 * (b - a) * x + 0.5 * (a + b), 0.5 * (b - a) * w


def _poly_mul(P, Q):
    out: dict = {}
    for a, c in P.items():
        for b, d in Q.items():
            k = tuple(x + y for x, y in zip(a, b))
            out[k] = out.get(k, 0.0) + c * d
    return out


def _corner_box(p: float, widths, poly: dict, m: int = 24) -> float:
    """int over prod [0, a_i] of |w|^{-p} poly(w) dw; poly has no constant term."""
    n = len(widths)
    total = 0.0
    for lead in range(n):
        a = widths[lead]
        others = [i for i in range(n) if i != lead]
        if others:
            pts = [_gl(0.0, widths[i] / a, m) for i in others]
            U = np.meshgrid(*[q[0] for q in pts], indexing="ij")
            W = np.ones_like(U[0])
            for q, Ui in zip(pts, range(len(others))):
                W = W * np.expand_dims(q[1], tuple(j for j in range(len(others)) if j != Ui))
            q = (1.0 + sum(u * u for u in U)) ** (-p / 2)
        for alpha, c in poly.items():
            deg = sum(alpha)
            e = n - 1 + deg - p + 1
            if e <= 0:
                raise DivergenceError("non-integrable corner term")
            rad = a ** e / e
            if others:
                mono = np.ones_like(U[0])
                for j, i in enumerate(others):
                    mono = mono * U[j] ** alpha[i]
                ang = float(np.sum(W * q * mono))
            else:
                ang = 1.0
            total += c * rad * ang
    return total


def _smooth_box(p: float, lo, hi, factors, m: int = 16) -> float:
    """Tensor Gauss rule for a box away from the origin; factors are (c0, c1) linear in w_a."""
    n = len(lo)
    pts = [_gl(lo[a], hi[a], m) for a in range(n)]
    X = np.meshgrid(*[q[0] for q in pts], indexing="ij")
    W = np.ones_like(X[0])
    val = (sum(x * x for x in X)) ** (-p / 2)
    for a in range(n):
        W = W * np.expand_dims(pts[a][1], tuple(j for j in range(n) if j != a))
        c0, c1 = factors[a]
        val = val * (c0 + c1 * X[a])
    return float(np.sum(W * val))


def _key(k) -> tuple:
    return tuple(sorted(abs(int(v)) for v in k))


@lru_cache(maxsize=None)
def _pair_unit(key: tuple, p: float) -> float:
    """int_{Q} int_{Q + k} |x - y|^{-p} for unit cubes Q, offset k != 0."""
    n = len(key)
    if not any(key):
        raise DivergenceError("a cell with itself has infinite interaction")
    total = 0.0
    # tent autocorrelation: prod_a (1 - |w_a - k_a|) on w in k + [-1, 1]^n
    for sides in itertools.product((-1, 1), repeat=n):
        lo = [key[a] - 1 if sides[a] < 0 else key[a] for a in range(n)]
        hi = [lo[a] + 1 for a in range(n)]
        # factor 1 - sigma (w - k) with sigma = sides
        factors = [(1.0 + sides[a] * key[a], -float(sides[a])) for a in range(n)]
        if all(l == 0 or h == 0 for l, h in zip(lo, hi)):
            poly = {(0,) * n: 1.0}
            for a in range(n):
                rho = 1.0 if lo[a] == 0 else -1.0
                c0, c1 = factors[a]
                e = [0] * n
                e[a] = 1
                poly = _poly_mul(poly, {(0,) * n: c0, tuple(e): c1 * rho})
            poly = {k: v for k, v in poly.items() if abs(v) > 0 and any(k)}
            total += _corner_box(p, [1.0] * n, poly)
        else:
            total += _smooth_box(p, lo, hi, factors)
    return total


def cell_pair_integral(offset, spacing: float, order: FractionalOrder) -> float:
    """Interaction of two grid cells at integer offset, by exact corner quadrature."""
    n = len(offset)
    p = order.kernel_exponent(n)
    return _pair_unit(_key(offset), p) * spacing ** (2 * n - p)


@lru_cache(maxsize=None)
def _self_perimeter_unit(n: int, p: float) -> float:
    # inner part: |z|^{-p} (1 - prod(1 - |z_a|)) over [-1, 1]^n
    poly = {(0,) * n: 1.0}
    for a in range(n):
        e = [0] * n
        e[a] = 1
        poly = _poly_mul(poly, {(0,) * n: 1.0, tuple(e): -1.0})
    poly = {k: -v for k, v in poly.items() if any(k)}
    inner = 2 ** n * _corner_box(p, [1.0] * n, poly)
    # outer part: pyramids beyond the faces of [-1, 1]^n
    if n == 1:
        ang = 1.0
    else:
        pts = [_gl(-1.0, 1.0, 48) for _ in range(n - 1)]
        U = np.meshgrid(*[q[0] for q in pts], indexing="ij")
        W = np.ones_like(U[0])
        for j, q in enumerate(pts):
            W = W * np.expand_dims(q[1], tuple(i for i in range(n - 1) if i != j))
        ang = float(np.sum(W * (1.0 + sum(u * u for u in U)) ** (-p / 2)))
    outer = 2 * n * ang / (p - n)
    return inner + outer


def cell_self_perimeter(n: int, spacing: float, order: FractionalOrder) -> float:
    """L(Q, complement of Q) for one grid cell Q."""
    p = order.kernel_exponent(n)
    return _self_perimeter_unit(n, p) * spacing ** (n - 2 * order.s)


def _halfspace_constant(n: int, s: float) -> float:
    """int_{z_1 > 1} |z|^{-(n+2s)} dz."""
    return pi ** ((n - 1) / 2) * gamma((1 + 2 * s) / 2) / gamma((n + 2 * s) / 2) / (2 * s)


# --------------------------------------------------------------------------
# dense interaction


def _midpoint_unit(key: tuple, p: float, m: int) -> float:
    n = len(key)
    d = np.arange(-(m - 1), m)
    mult = (m - np.abs(d)).astype(float)
    grids = np.meshgrid(*[key[a] + d / m for a in range(n)], indexing="ij")
    W = np.ones_like(grids[0])
    for a in range(n):
        W = W * np.expand_dims(mult, tuple(j for j in range(n) if j != a))
    r2 = sum(g * g for g in grids)
    return float(np.sum(W * r2 ** (-p / 2))) / m ** (2 * n)


def _offset_weights(a: np.ndarray, b: np.ndarray) -> dict:
    ia = np.argwhere(a > 0)
    ib = np.argwhere(b > 0)
    out: dict = {}
    if len(ia) == 0 or len(ib) == 0:
        return out
    va = a[tuple(ia.T)]
    vb = b[tuple(ib.T)]
    for i, x in zip(ia, va):
        k = ib - i
        w = x * vb
        for kk, ww in zip(map(_key, k), w):
            out[kk] = out.get(kk, 0.0) + float(ww)
    return out


def dense_interaction(A: IndicatorGrid, B: IndicatorGrid, order: FractionalOrder,
                      sub_resolution: int = 16) -> OracleReport:
    """L(A, B) over grid cells by subcell midpoint sums (touching cells: corner quadrature).

    Sums at ``sub_resolution``, half and a quarter of it are extrapolated
    twice; the last Richardson difference is the error estimate.
    """
    if not A.compatible(B):
        raise InputError("dense interaction needs compatible grids")
    if A.exterior.kind != "empty" or B.exterior.kind != "empty":
        raise InputError("the dense oracle handles grid cells only (empty exteriors)")
    m = int(sub_resolution)
    if m < 4 or m % 4:
        raise InputError("sub_resolution must be a multiple of 4")
    a = np.asarray(A.cells)
    b = np.asarray(B.cells)
    n = A.dim
    pairs = int(np.count_nonzero(a)) * int(np.count_nonzero(b)) * m ** (2 * n)
    if pairs > PAIR_BUDGET:
        raise OracleRefusal(f"dense interaction needs {pairs} subcell pairs; budget is {PAIR_BUDGET}")
    if np.any(a * b > 0):
        raise DivergenceError("sets overlap; the interaction diverges")
    p = order.kernel_exponent(n)
    weights = _offset_weights(a, b)
    val = 0.0
    err = 0.0
    for key in sorted(weights):
        w = weights[key]
        if max(key) <= 1:
            val += w * _pair_unit(key, p)
            continue
        S = [_midpoint_unit(key, p, m // q) for q in (1, 2, 4)]
        r1 = (4 * S[0] - S[1]) / 3
        r2 = (4 * S[1] - S[2]) / 3
        val += w * (r1 + (r1 - r2) / 15)
        err += w * abs(r1 - r2) / 15
    scale = A.spacing ** (2 * n - p)
    return OracleReport(val * scale, "dense-midpoint-richardson", A.spacing / m, err * scale,
                        {"subcell_pairs": pairs})


# --------------------------------------------------------------------------
# exhaustive set minimization


def _aligned_halfspace(rule, E: IndicatorGrid):
    """(axis, sign, offset in cell units) for a half-space on grid lines, else None."""
    e = np.asarray(rule.normal)
    ax = int(np.argmax(np.abs(e)))
    if not np.isclose(abs(e[ax]), 1.0, atol=1e-12):
        return None
    sign = float(np.sign(e[ax]))
    # {sign * x_ax < offset} -> boundary at x_ax = sign * offset
    t = (sign * rule.offset - E.lo[ax]) / E.spacing
    if abs(t - round(t)) > 1e-9:
        return None
    return ax, sign, float(round(t))


def _box_exterior_potentials(E: IndicatorGrid, order: FractionalOrder, pair):
    """Cell interactions with (box exterior within the rule, box exterior outside it)."""
    n = E.dim
    s = order.s
    h = E.spacing
    shape = E.shape
    N = int(np.prod(shape))
    scale = h ** (n - 2 * s)
    self_per = cell_self_perimeter(n, 1.0, order)
    idx = np.stack(np.unravel_index(np.arange(N), shape), -1)
    box_sum = pair.sum(axis=1)
    full = (self_per - box_sum) * scale
    rule = E.exterior
    if rule.kind == "empty":
        return np.zeros(N), full
    if rule.kind == "full":
        return full, np.zeros(N)
    al = _aligned_halfspace(rule, E)
    if al is None:
        raise OracleRefusal("the enumeration oracle needs a half-space bounded by grid lines")
    ax, sign, t = al
    A = _halfspace_constant(n, s)
    q = 1.0 - 2 * s
    inH = (sign * (idx[:, ax] + 0.5 - t) < 0)
    # distance (cell units) from each cell to the plane, near and far side
    t0 = np.abs(idx[:, ax] + 0.5 - t) - 0.5
    other_side = A * ((t0 + 1) ** q - t0 ** q) / q
    in_box_H = pair[:, inH].sum(axis=1)
    rule_part = np.where(inH, self_per - other_side - in_box_H, other_side - in_box_H) * scale
    return rule_part, full - rule_part


def _pair_matrix(E: IndicatorGrid, order: FractionalOrder) -> np.ndarray:
    n = E.dim
    p = order.kernel_exponent(n)
    N = int(np.prod(E.shape))
    idx = np.stack(np.unravel_index(np.arange(N), E.shape), -1)
    P = np.zeros((N, N))
    for i in range(N):
        for j in range(i + 1, N):
            P[i, j] = P[j, i] = _pair_unit(_key(idx[j] - idx[i]), p)
    return P


def exhaustive_set_min(obstacle: Obstacle, exterior: IndicatorGrid, order: FractionalOrder,
                       window=None, max_free: int = 16):
    """Global minimizer of the window s-perimeter over sharp sets containing the obstacle.

    Returns (OracleReport, IndicatorGrid).  Cells outside the window keep the
    values of ``exterior``; beyond the box its rule applies.
    """
    if obstacle.set is None:
        raise InputError("set obstacle required")
    O = obstacle.set
    if not O.compatible(exterior):
        raise InputError("obstacle and exterior must share one grid")
    C = exterior.centers()
    if window is None:
        omega = np.ones(exterior.shape, dtype=bool)
    else:
        lo, hi = (np.asarray(v, dtype=float) for v in window)
        omega = np.all((C > lo) & (C < hi), axis=-1)
    obst = (np.asarray(O.cells) >= 0.5) & omega
    free = omega & ~obst
    F = int(free.sum())
    if F > max_free:
        raise OracleRefusal(f"{F} free cells need 2^{F} states; the oracle stops at {max_free} cells")
    if not exterior.is_sharp:
        raise InputError("frozen cells must be sharp")
    n = exterior.dim
    N = int(np.prod(exterior.shape))
    p = order.kernel_exponent(n)
    P = _pair_matrix(exterior, order)
    VE, VCE = _box_exterior_potentials(exterior, order, P)
    P = P * exterior.spacing ** (2 * n - p)
    om = omega.reshape(-1)
    base = np.where(obst, 1.0, np.asarray(exterior.cells)).reshape(-1)
    base = np.where(free.reshape(-1), 0.0, base)
    fidx = np.flatnonzero(free.reshape(-1))
    states = ((np.arange(2 ** F)[:, None] >> np.arange(F)[None, :]) & 1).astype(float)
    theta = np.repeat(base[None, :], len(states), axis=0)
    theta[:, fidx] = states
    c = 1.0 - theta
    c_om = c * om
    t_om = theta * om
    t_out = theta * ~om
    energy = (np.einsum("ki,ki->k", t_om, c @ P) + t_om @ VCE
              + np.einsum("ki,ki->k", t_out, c_om @ P) + c_om @ VE)
    best = float(energy.min())
    tie = np.flatnonzero(energy <= best + 1e-12 * max(1.0, abs(best)))
    k = int(tie[0])
    result = exterior.with_cells(theta[k].reshape(exterior.shape))
    return (OracleReport(float(energy[k]), "exhaustive-enumeration", exterior.spacing, 0.0,
                         {"states": len(states), "ties": len(tie)}), result)


# --------------------------------------------------------------------------
# exhaustive active set


def _polarize(fun: Callable[[np.ndarray], float], N: int):
    """Quadratic form of ``fun`` from point evaluations: fun(u) = 1/2 u.H.u - c.u + e0."""
    e0 = fun(np.zeros(N))
    I = np.eye(N)
    plus = np.array([fun(I[i]) for i in range(N)])
    minus = np.array([fun(-I[i]) for i in range(N)])
    c = -(plus - minus) / 2
    H = np.diag(plus + minus - 2 * e0)
    for i in range(N):
        for j in range(i + 1, N):
            H[i, j] = H[j, i] = fun(I[i] + I[j]) - plus[i] - plus[j] + e0
    return H, c, e0


def exhaustive_active_set(phi: GraphFunction, exterior: ExteriorSpec, f: Optional[GraphFunction],
                          order: FractionalOrder, spec: Optional[KernelSpec] = None,
                          max_nodes: int = 16):
    """Enumerate contact patterns of the quadratic graph obstacle problem.

    The quadratic form is recovered from evaluations of the energy
    J_s(u) + int f u; each pattern pins its nodes to phi, solves the
    stationarity system on the rest, and is kept when feasible.  Ties go to
    the fewest contacts, then the smallest pattern index.
    Returns (OracleReport, GraphFunction).
    """
    N = phi.values.size
    if N > max_nodes:
        raise OracleRefusal(f"{N} nodes need 2^{N} patterns; the oracle stops at {max_nodes} nodes")
    grid = GraphFunction(phi.dim, phi.radius, phi.spacing, np.zeros_like(phi.values), exterior)
    op = GraphOperator(grid, spec or KernelSpec(order, grid.spacing))
    hd = grid.spacing ** grid.dim
    fv = np.zeros(N) if f is None else f.values.reshape(-1)

    def energy(u):
        return op.Js(u) + hd * float(fv @ u)

    H, c, e0 = _polarize(energy, N)
    ph = phi.values.reshape(-1)
    tol = 1e-10 * max(1.0, float(np.max(np.abs(c))), float(np.max(np.abs(np.diag(H)))))
    best = None
    skipped = 0
    feasible = 0
    bits = 1 << np.arange(N)
    for mask in range(2 ** N):
        act = (mask & bits) > 0
        u = np.where(act, ph, 0.0)
        fr = ~act
        if np.any(fr):
            Hff = H[np.ix_(fr, fr)]
            rhs = c[fr] - H[np.ix_(fr, act)] @ ph[act]
            try:
                y = np.linalg.solve(Hff, rhs)
            except np.linalg.LinAlgError:
                skipped += 1
                continue
            if not np.all(np.isfinite(y)) or np.linalg.norm(Hff @ y - rhs) > 1e-9 * (np.linalg.norm(rhs) + 1e-300):
                skipped += 1
                continue
            u[fr] = y
        g = H @ u - c
        if np.any(u[fr] < ph[fr] - 1e-12) or np.any(g[act] < -tol):
            continue
        feasible += 1
        E = 0.5 * float(u @ H @ u) - float(c @ u) + e0
        key = (E, int(act.sum()), mask)
        if best is None:
            best = (key, u)
            continue
        (Eb, nb, _), _ = best
        if E < Eb - 1e-12 * max(1.0, abs(Eb)) or (abs(E - Eb) <= 1e-12 * max(1.0, abs(Eb)) and act.sum() < nb):
            best = (key, u)
    if best is None:
        raise OracleRefusal("no feasible contact pattern found")
    (E, ncont, mask), u = best
    sol = grid.with_values(u.reshape(grid.values.shape))
    return (OracleReport(float(energy(u)), "exhaustive-active-set", grid.spacing, 0.0,
                         {"pattern": mask, "contacts": ncont, "feasible": feasible,
                          "skipped": skipped}), sol)


# --------------------------------------------------------------------------
# finite differences


def fd_gradient_check(functional: Callable[[np.ndarray], float], gradient: Callable[[np.ndarray], np.ndarray],
                      point, direction, steps: Sequence[float] = (1e-2, 5e-3, 2.5e-3, 1.25e-3),
                      floor: Optional[float] = None) -> OracleReport:
    """Central-difference directional derivative against the analytic gradient.

    ``value`` is the smallest relative mismatch over the steps; the observed
    order is the log-log slope of the mismatch (nan at the roundoff floor).
    """
    steps = [float(t) for t in steps]
    if len(steps) < 3 or any(b >= a for a, b in zip(steps, steps[1:])):
        raise InputError("need at least 3 strictly decreasing steps")
    x = np.asarray(point, dtype=float)
    d = np.asarray(direction, dtype=float)
    an = float(np.sum(np.asarray(gradient(x)) * d))
    f0 = functional(x)
    floor = 1e-8 * max(1.0, abs(f0)) if floor is None else floor
    errs = []
    for t in steps:
        fd = (functional(x + t * d) - functional(x - t * d)) / (2 * t)
        errs.append(abs(fd - an))
    errs = np.array(errs)
    rel = errs / max(abs(an), floor)
    order_est = float("nan")
    big = errs > 1e3 * np.finfo(float).eps * max(1.0, abs(f0)) / np.array(steps)
    if np.sum(big) >= 2:
        order_est = float(np.polyfit(np.log(np.array(steps)[big]), np.log(errs[big]), 1)[0])
    return OracleReport(float(rel.min()), "central-difference", min(steps), 0.0,
                        {"order": order_est, "abs_mismatch": float(errs.min()), "analytic": an})
