"""Regularity forensics on solver output: exponent fits, seminorms, residual audits."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from .domain import (ContactSet, FractionalOrder, GraphFunction, IndicatorGrid, format_real)
from .energy import interaction, perimeter, s_perimeter
from .errors import InputError, InsufficientResolutionError, ResolutionError
from .kernels import GraphOperator, KernelSpec

__all__ = [
    "ExponentFit", "RegularPoint", "ELAudit", "fit_detachment_exponent", "regular_point_test",
    "holder_seminorm", "euler_lagrange_residual", "flatness_decay", "almost_minimality_audit",
    "unit_ball_interaction", "csv_text", "write_csv", "dyadic_radii",
]


@dataclass
class ExponentFit:
    radii: np.ndarray
    values: np.ndarray
    slope: float
    intercept: float
    r_squared: float
    window: tuple
    flags: tuple = ()
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        r = np.asarray(self.radii, dtype=float)
        if r.size > 1 and np.any(np.diff(r) >= 0):
            raise InputError("radii must be strictly decreasing")

    def summary(self) -> dict:
        return {"slope": self.slope, "intercept": self.intercept, "r_squared": self.r_squared,
                "r_min": self.window[0], "r_max": self.window[1], "flags": list(self.flags)}

    def rows(self):
        lo, hi = self.window
        for r, v in zip(self.radii, self.values):
            yield {"radius": r, "value": v,
                   "slope_window_flag": int(lo - 1e-12 <= r <= hi + 1e-12)}


def dyadic_radii(h: float, r_max: float, r_min_cells: float = 4.0) -> np.ndarray:
    """4h, 8h, ... up to r_max, returned in decreasing order."""
    out = []
    r = r_min_cells * h
    while r <= r_max * (1 + 1e-12):
        out.append(r)
        r *= 2.0
    return np.array(out[::-1])


def _fit(radii, values, window, h, flags=()):
    radii = np.asarray(radii, dtype=float)
    values = np.asarray(values, dtype=float)
    lo, hi = window if window is not None else (radii.min(), radii.max())
    lo = max(lo, 4 * h * (1 - 1e-12))
    sel = (radii >= lo * (1 - 1e-12)) & (radii <= hi * (1 + 1e-12)) & (values > 0)
    if np.sum(sel) < 4:
        raise InsufficientResolutionError(
            f"only {int(np.sum(sel))} usable radii in the window [{lo}, {hi}]; need 4")
    x, y = np.log(radii[sel]), np.log(values[sel])
    A = np.stack([x, np.ones_like(x)], -1)
    (slope, icpt), *_ = np.linalg.lstsq(A, y, rcond=None)
    pred = A @ np.array([slope, icpt])
    ss = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - float(np.sum((y - pred) ** 2)) / ss if ss > 0 else 1.0
    return ExponentFit(radii, values, float(slope), float(icpt), r2,
                       (float(radii[sel].min()), float(radii[sel].max())), tuple(flags))


def _point(u: GraphFunction, x0) -> np.ndarray:
    """Cell centre for an index (tuple/int) or a coordinate."""
    if isinstance(x0, (int, np.integer)) or (isinstance(x0, tuple) and
                                             all(isinstance(v, (int, np.integer)) for v in x0)):
        idx = np.atleast_1d(np.asarray(x0, dtype=int))
        if idx.shape != (u.dim,) or np.any(idx < 0) or np.any(idx >= u.n):
            raise InputError(f"{x0!r} is not a cell index")
        return -u.radius + u.spacing * (idx + 0.5)
    x = np.atleast_1d(np.asarray(x0, dtype=float))
    if x.shape != (u.dim,):
        raise InputError("point has the wrong dimension")
    return x


def _ball_sup(diff, centers, x0, radii):
    dist = np.sqrt(np.sum((centers - x0) ** 2, axis=-1))
    return np.array([diff[dist <= r * (1 + 1e-12)].max() for r in radii])


def _max_radius(u: GraphFunction, x0):
    return float(np.min(u.radius - np.abs(x0)))


def fit_detachment_exponent(u: GraphFunction, phi: GraphFunction, x0, window=None,
                            r_max: Optional[float] = None) -> ExponentFit:
    """Slope of log sup_{B_r(x0)} (u - phi) against log r over dyadic radii from 4h."""
    if u.values.shape != phi.values.shape:
        raise InputError("u and phi must share one grid")
    x = _point(u, x0)
    rm = _max_radius(u, x) if r_max is None else min(r_max, _max_radius(u, x))
    radii = dyadic_radii(u.spacing, rm)
    if len(radii) < 4:
        raise InsufficientResolutionError("fewer than 4 dyadic radii fit inside the domain")
    C = u.centers().reshape(-1, u.dim)
    vals = _ball_sup((u.values - phi.values).reshape(-1), C, x, radii)
    return _fit(radii, vals, window, u.spacing)


@dataclass
class RegularPoint:
    regular: bool
    score: float
    normalized: float
    threshold: float
    radii: np.ndarray
    values: np.ndarray


def regular_point_test(u: GraphFunction, v: GraphFunction, x0, order: FractionalOrder,
                       threshold: float = 0.1, r_max: Optional[float] = None) -> RegularPoint:
    """score = max_r r^{-(3/2+s)} sup_{B_r}(u - v) over dyadic r in [4h, r_max].

    The classification uses the scale-free ratio of the smallest-radius value
    to the maximum, compared with ``threshold``.
    """
    x = _point(u, x0)
    rm = _max_radius(u, x) if r_max is None else min(r_max, _max_radius(u, x))
    radii = dyadic_radii(u.spacing, rm)
    if len(radii) < 4:
        raise InsufficientResolutionError("fewer than 4 dyadic radii fit inside the domain")
    C = u.centers().reshape(-1, u.dim)
    vals = _ball_sup((u.values - v.values).reshape(-1), C, x, radii)
    raw = radii ** (-(1.5 + order.s)) * vals
    score = float(raw.max())
    norm = float(raw[-1] / score) if score > 0 else 0.0
    return RegularPoint(norm > threshold, score, norm, threshold, radii, vals)


def _differences(w: GraphFunction, k: int) -> np.ndarray:
    """Centred differences of order k at every cell (ghost values from the exterior); shape (N, m)."""
    h = w.spacing
    ax = -w.radius + h * (np.arange(-1, w.n + 1) + 0.5)
    if w.dim == 1:
        pts = ax[:, None]
    else:
        X, Y = np.meshgrid(ax, ax, indexing="ij")
        pts = np.stack([X, Y], -1)
    P = w.exterior(pts)
    P[(slice(1, -1),) * w.dim] = w.values
    if k == 0:
        return w.values.reshape(-1, 1)
    if w.dim == 1:
        if k == 1:
            return ((P[2:] - P[:-2]) / (2 * h))[:, None]
        return ((P[2:] - 2 * P[1:-1] + P[:-2]) / h ** 2)[:, None]
    c = P[1:-1, 1:-1]
    if k == 1:
        gx = (P[2:, 1:-1] - P[:-2, 1:-1]) / (2 * h)
        gy = (P[1:-1, 2:] - P[1:-1, :-2]) / (2 * h)
        return np.stack([gx.ravel(), gy.ravel()], -1)
    hxx = (P[2:, 1:-1] - 2 * c + P[:-2, 1:-1]) / h ** 2
    hyy = (P[1:-1, 2:] - 2 * c + P[1:-1, :-2]) / h ** 2
    hxy = (P[2:, 2:] - P[2:, :-2] - P[:-2, 2:] + P[:-2, :-2]) / (4 * h ** 2)
    return np.stack([hxx.ravel(), np.sqrt(2) * hxy.ravel(), hyy.ravel()], -1)


def _d1(a, h, axis):
    return np.gradient(a, h, axis=axis, edge_order=2)


def _d2(a, h, axis):
    """Centred second difference; third-order one-sided at the two ends."""
    a = np.moveaxis(a, axis, 0)
    out = np.empty_like(a)
    out[1:-1] = a[2:] - 2 * a[1:-1] + a[:-2]
    out[0] = 2 * a[0] - 5 * a[1] + 4 * a[2] - a[3]
    out[-1] = 2 * a[-1] - 5 * a[-2] + 4 * a[-3] - a[-4]
    return np.moveaxis(out / h ** 2, 0, axis)


def _inner_differences(w: GraphFunction, k: int) -> np.ndarray:
    """Differences of order k from grid values only (one-sided at the box edge)."""
    a, h = w.values, w.spacing
    if k == 0:
        return a.reshape(-1, 1)
    if w.n < 4:
        raise ResolutionError("need at least 4 cells per direction")
    if k == 1:
        return np.stack([_d1(a, h, ax).ravel() for ax in range(w.dim)], -1)
    if w.dim == 1:
        return _d2(a, h, 0).reshape(-1, 1)
    hxy = _d1(_d1(a, h, 0), h, 1)
    return np.stack([_d2(a, h, 0).ravel(), np.sqrt(2) * hxy.ravel(), _d2(a, h, 1).ravel()], -1)


def holder_seminorm(w: GraphFunction, derivative_order: int, beta: float, region=None,
                    seed: int = 0, max_pairs: int = 10 ** 6) -> float:
    """max |D^k w(x) - D^k w(y)| / |x - y|^beta over cell pairs in the region.

    ``region`` is a box (lo, hi) or a boolean cell mask; pairs are exhaustive
    below ``max_pairs`` and drawn with a seeded generator above.
    """
    if derivative_order not in (0, 1, 2):
        raise InputError("derivative order must be 0, 1 or 2")
    if not (0 < beta <= 1):
        raise InputError("beta must lie in (0, 1]")
    D = _inner_differences(w, derivative_order)
    C = w.centers().reshape(-1, w.dim)
    if region is None:
        mask = np.ones(len(C), dtype=bool)
    elif isinstance(region, np.ndarray) and region.dtype == bool:
        mask = region.reshape(-1)
    else:
        lo, hi = (np.atleast_1d(np.asarray(x, dtype=float)) for x in region)
        mask = np.all((C >= lo - 1e-12) & (C <= hi + 1e-12), axis=-1)
    idx = np.flatnonzero(mask)
    per_axis = np.array([len(np.unique(C[idx, a])) for a in range(w.dim)]) if len(idx) else [0]
    if np.min(per_axis) < 4:
        raise ResolutionError("region must contain at least 4 cells per direction")
    m = len(idx)
    npairs = m * (m - 1) // 2
    best = 0.0
    if npairs <= max_pairs:
        for start in range(0, m, 512):
            i = idx[start:start + 512]
            dx = np.sqrt(np.sum((C[i][:, None, :] - C[idx][None, :, :]) ** 2, -1))
            dd = np.sqrt(np.sum((D[i][:, None, :] - D[idx][None, :, :]) ** 2, -1))
            with np.errstate(divide="ignore", invalid="ignore"):
                q = np.where(dx > 0, dd / dx ** beta, 0.0)
            best = max(best, float(q.max()))
        return best
    rng = np.random.default_rng(seed)
    a = rng.integers(0, m, max_pairs)
    b = rng.integers(0, m, max_pairs)
    keep = a != b
    a, b = idx[a[keep]], idx[b[keep]]
    dx = np.sqrt(np.sum((C[a] - C[b]) ** 2, -1))
    dd = np.sqrt(np.sum((D[a] - D[b]) ** 2, -1))
    return float(np.max(dd / dx ** beta))


def mean_curvature(v: GraphFunction) -> np.ndarray:
    """div(grad v / sqrt(1 + |grad v|^2)) from centred differences (non-divergence form)."""
    g = _differences(v, 1)
    H = _differences(v, 2)
    if v.dim == 1:
        return (H[:, 0] / (1 + g[:, 0] ** 2) ** 1.5).reshape(v.values.shape)
    gx, gy = g[:, 0], g[:, 1]
    hxx, hxy, hyy = H[:, 0], H[:, 1] / np.sqrt(2), H[:, 2]
    q = 1 + gx * gx + gy * gy
    k = ((1 + gy * gy) * hxx - 2 * gx * gy * hxy + (1 + gx * gx) * hyy) / q ** 1.5
    return k.reshape(v.values.shape)


@dataclass
class ELAudit:
    cells: tuple
    residual: np.ndarray
    kappa: np.ndarray
    curvature: np.ndarray
    excluded: tuple
    tol: float
    kappa_ok: bool
    curvature_ok: bool
    combined_ok: bool
    max_residual: float

    def rows(self):
        for c, r, k, K in zip(self.cells, self.residual, self.kappa, self.curvature):
            yield {"cell": "-".join(map(str, c)), "residual": r, "kappa": k, "curvature": K}


def euler_lagrange_residual(u: GraphFunction, v: GraphFunction, Q: ContactSet, order: FractionalOrder,
                            f: Optional[GraphFunction] = None, g: Optional[GraphFunction] = None,
                            r_int: float = 0.0, ring: Optional[float] = None,
                            tol: Optional[float] = None, spec: Optional[KernelSpec] = None) -> ELAudit:
    """kappa_v + K_E - (f + g) on interior contact cells, with the one-sided checks.

    Interior cells are at least ``r_int`` from the complement of Q and at
    least ``ring`` (default 8h) from the domain boundary.  The one-sided
    checks use the forcing-corrected quantities kappa_v - g >= -tol (away
    from the ring), K_E - f <= tol on Q and its 2-cell neighbourhood, and
    (kappa_v - g) + 2 (K_E - f) <= tol on Q.
    """
    h = u.spacing
    ring = 8 * h if ring is None else ring
    tol = 20 * h ** (1 - 2 * order.s) if tol is None else tol
    shape = u.values.shape
    fv = np.zeros(shape) if f is None else f.values
    gv = np.zeros(shape) if g is None else g.values
    mask = Q.mask() if len(Q) else np.zeros(shape, dtype=bool)
    C = u.centers().reshape(-1, u.dim)
    away = (np.min(u.radius - np.abs(C), axis=-1) >= ring - 1e-12).reshape(shape)
    inside = mask.copy()
    if r_int > 0 and np.any(~mask):
        out = C[(~mask).reshape(-1)]
        dist = np.array([np.min(np.sqrt(np.sum((out - c) ** 2, -1))) for c in C]).reshape(shape)
        inside &= dist >= r_int - 1e-12
    audited = inside & away
    excluded = tuple(tuple(int(i) for i in idx) for idx in np.argwhere(inside & ~away))
    kappa = mean_curvature(v)
    near = mask.copy()
    for ax in range(u.dim):
        for step in (-2, -1, 1, 2):
            near |= np.roll(mask, step, axis=ax)
    need = (audited | (near & away)).reshape(-1)
    op = GraphOperator(u, spec or KernelSpec(order, h))
    K = np.full(u.values.size, np.nan)
    rows = np.flatnonzero(need)
    if len(rows):
        op.check_slope(u.values)
        K[rows] = op.curvature_rows(u.values, rows)
    K = K.reshape(shape)
    res = kappa + K - (fv + gv)
    kappa_ok = bool(np.all((kappa - gv)[away] >= -tol))
    sel = near & away
    curvature_ok = bool(np.all((K - fv)[sel] <= tol)) if np.any(sel) else True
    on = mask & away
    combined_ok = bool(np.all(((kappa - gv) + 2 * (K - fv))[on] <= tol)) if np.any(on) else True
    cells = tuple(tuple(int(i) for i in idx) for idx in np.argwhere(audited))
    r = res[audited]
    return ELAudit(cells, r, kappa[audited], K[audited], excluded, tol, kappa_ok, curvature_ok,
                   combined_ok, float(np.max(np.abs(r))) if r.size else 0.0)


def _boundary_points(E):
    """Points of the discrete boundary: graph points or face centres of a sharp grid."""
    if isinstance(E, GraphFunction):
        C = E.centers().reshape(-1, E.dim)
        return np.concatenate([C, E.values.reshape(-1, 1)], axis=1), E.spacing
    if not E.is_sharp:
        raise InputError("flatness needs a sharp indicator")
    pts = []
    cells = np.asarray(E.cells)
    Cc = E.centers()
    for ax in range(E.dim):
        a = np.take(cells, range(cells.shape[ax] - 1), axis=ax)
        b = np.take(cells, range(1, cells.shape[ax]), axis=ax)
        ca = np.take(Cc, range(cells.shape[ax] - 1), axis=ax)
        cb = np.take(Cc, range(1, cells.shape[ax]), axis=ax)
        diff = a != b
        pts.append(0.5 * (ca[diff] + cb[diff]))
    return np.concatenate(pts), E.spacing


def flatness_decay(E, x0, window=None, r_max: Optional[float] = None) -> ExponentFit:
    """Width of the boundary about its best plane through x0, per dyadic radius.

    Graphs are cut by balls in the base variable, sets by balls in space.
    The plane normal is the least principal direction of the boundary points
    in the ball (second moments about x0).  ``slope - 1`` estimates beta.
    """
    pts, h = _boundary_points(E)
    x0 = np.asarray(x0, dtype=float)
    if isinstance(E, GraphFunction) and x0.shape == (E.dim,):
        x0 = np.append(x0, E.evaluate(x0[None, :])[0])
    if x0.shape != (pts.shape[1],):
        raise InputError("boundary point has the wrong dimension")
    if isinstance(E, GraphFunction):
        room = float(np.min(E.radius - np.abs(x0[:-1])))
    else:
        room = float(np.min(np.minimum(x0 - E.lo, E.hi - x0)))
    rm = room if r_max is None else min(r_max, room)
    radii = dyadic_radii(h, rm)
    if len(radii) < 4:
        raise InsufficientResolutionError("fewer than 4 dyadic radii fit inside the domain")
    widths, normals = [], []
    graph = isinstance(E, GraphFunction)
    for r in radii:
        z = pts - x0
        base = z[:, :-1] if graph else z
        z = z[np.sum(base * base, -1) <= r * r * (1 + 1e-12)]
        if len(z) < pts.shape[1]:
            widths.append(0.0)
            normals.append(np.full(pts.shape[1], np.nan))
            continue
        M = z.T @ z
        evals, evecs = np.linalg.eigh(M)
        e = evecs[:, 0]
        if e[-1] < 0 or (e[-1] == 0 and e[0] < 0):
            e = -e
        normals.append(e)
        widths.append(float(np.max(np.abs(z @ e))))
    widths = np.array(widths)
    flags = []
    if np.all(widths <= h * (1 + 1e-9)):
        flags.append("resolution floor")
        fit = ExponentFit(radii, widths, np.nan, np.nan, np.nan, (radii.min(), radii.max()),
                          tuple(flags))
    else:
        fit = _fit(radii, widths, window, h, flags)
    normals = np.array(normals)
    angles = [float(np.arccos(min(1.0, abs(float(a @ b))))) for a, b in zip(normals[:-1], normals[1:])]
    fit.extra = {"normals": normals, "angles": np.array(angles)}
    return fit


# --------------------------------------------------------------------------
# almost minimality


def unit_ball_interaction(n: int, order: FractionalOrder, spacing: float = 1 / 32) -> float:
    """L(B_1, complement of B_1) in R^n, by the grid evaluator on [-2, 2]^n."""
    from .domain import ExteriorRule
    lo, hi = (-2.0,) * n, (2.0,) * n
    B = IndicatorGrid.from_function(lambda x: (np.sum(x * x, -1) < 1.0).astype(float), lo, hi,
                                    spacing, ExteriorRule("empty"))
    CB = IndicatorGrid(B.lo, spacing, 1.0 - B.cells, ExteriorRule("full"))
    return interaction(B, CB, order)


def almost_minimality_audit(F: IndicatorGrid, E: IndicatorGrid, order: FractionalOrder,
                            trials: int = 50, seed: int = 0, r_range=None, window=None,
                            C_hat: Optional[float] = None, max_resample: int = 1000) -> dict:
    """Check Per(F) - Per(F u B_r) <= L(B_r, C B_r) on seeded random balls.

    L(B_r, C B_r) = C_hat r^{n-2s} with C_hat = L(B_1, C B_1) computed once.
    Balls that leave the window are resampled.
    """
    if not F.compatible(E):
        raise InputError("F and E must share one grid")
    n = F.dim
    h = F.spacing
    lo, hi = (F.lo, F.hi) if window is None else (np.asarray(window[0], float), np.asarray(window[1], float))
    r_lo, r_hi = (4 * h, 0.25) if r_range is None else r_range
    if r_lo < 4 * h:
        raise ResolutionError("radii below 4h are not resolved")
    if C_hat is None:
        C_hat = unit_ball_interaction(n, order)
    P0 = perimeter(F, relaxed=False)
    C = F.centers()
    rows = []
    for t in range(trials):
        rng = np.random.default_rng([seed, t])
        for _ in range(max_resample):
            r = float(np.exp(rng.uniform(np.log(r_lo), np.log(r_hi))))
            x0 = rng.uniform(lo, hi)
            if np.all(x0 - r >= lo) and np.all(x0 + r <= hi):
                break
        else:
            raise ResolutionError("could not place a ball inside the window")
        ball = np.sum((C - x0) ** 2, -1) <= r * r
        F2 = F.with_cells(np.maximum(F.cells, ball))
        E2 = E.with_cells(np.maximum(E.cells, ball))
        lhs = P0 - perimeter(F2)
        rhs = C_hat * r ** (n - 2 * order.s)
        rows.append({"trial": t, "radius": r, "center": " ".join(format_real(v) for v in x0),
                     "lhs": lhs, "rhs": rhs, "ratio": lhs / rhs,
                     "contains": int(not np.any(ball & (np.asarray(E2.cells) < 0.5))),
                     "ok": int(lhs <= rhs)})
    return {"C_hat": C_hat, "rows": rows, "violations": sum(1 - r["ok"] for r in rows),
            "max_ratio": max(r["ratio"] for r in rows) if rows else 0.0}


# --------------------------------------------------------------------------
# output


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return format_real(float(v))
    return str(v)


def csv_text(rows: Sequence[dict], header: Optional[Sequence[str]] = None) -> str:
    rows = list(rows)
    if header is None:
        header = list(rows[0].keys()) if rows else []
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(r[k]) for k in header])
    return buf.getvalue()


def write_csv(path, rows, header=None) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(csv_text(rows, header))


def fit_json(fit: ExponentFit) -> str:
    return json.dumps({k: (format_real(v) if isinstance(v, float) else v)
                       for k, v in fit.summary().items()}, sort_keys=True)
