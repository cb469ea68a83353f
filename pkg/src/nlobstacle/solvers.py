"""Constrained minimization: graph obstacle problem, two membranes, s-minimal sets."""
from __future__ import annotations

import time
import warnings
from dataclasses import dataclass, field
from typing import Any, Optional

import numpy as np
from scipy import linalg, sparse

from .domain import (ContactSet, ExteriorSpec, FractionalOrder, GraphFunction, IndicatorGrid,
                     Obstacle, contact_set_from_mask, default_tol_contact)
from .energy import SetEnergy, graph_area, graph_area_grad
from .errors import ConfigurationError, InputError
from .kernels import GraphOperator, KernelSpec

__all__ = ["SolverConfig", "SolveReport", "solve_fractional_obstacle", "solve_two_membranes",
           "solve_s_minimal_set", "graph_area_hessian"]


@dataclass(frozen=True)
class SolverConfig:
    max_iters: int = 500
    tol_energy: float = 1e-13
    tol_kkt: float = 1e-8
    step_rule: str = "armijo"  # or "fixed"
    step_size: float = 1.0  # tau for the fixed rule, initial trial step otherwise
    armijo_c1: float = 1e-4
    armijo_shrink: float = 0.5
    mode: str = "quadratic"  # or "exact"
    newton: bool = True
    restarts: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.max_iters < 1:
            raise ConfigurationError("max_iters must be at least 1")
        if not (self.tol_energy > 0 and self.tol_kkt > 0):
            raise ConfigurationError("tolerances must be positive")
        if self.step_rule not in ("armijo", "fixed"):
            raise ConfigurationError(f"unknown step rule {self.step_rule!r}")
        if not (0 < self.armijo_c1 < 1 and 0 < self.armijo_shrink < 1):
            raise ConfigurationError("Armijo parameters must lie in (0, 1)")
        if self.step_size <= 0:
            raise ConfigurationError("step size must be positive")
        if self.mode not in ("quadratic", "exact"):
            raise ConfigurationError(f"unknown mode {self.mode!r}")
        if self.restarts < 0:
            raise ConfigurationError("restarts must be nonnegative")

    @classmethod
    def from_mapping(cls, m) -> "SolverConfig":
        kinds = {"max_iters": int, "tol_energy": float, "tol_kkt": float, "step_rule": str,
                 "step_size": float, "armijo_c1": float, "armijo_shrink": float, "mode": str,
                 "newton": _as_bool, "restarts": int, "seed": int}
        unknown = set(m) - set(kinds)
        if unknown:
            raise ConfigurationError(f"unknown solver keys: {sorted(unknown)}")
        return cls(**{k: kinds[k](v) for k, v in m.items()})


def _as_bool(v):
    if isinstance(v, bool):
        return v
    s = str(v).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ConfigurationError(f"not a boolean: {v!r}")


@dataclass
class SolveReport:
    solution: Any
    iterations: int
    energy_trace: np.ndarray
    kkt_residual: float
    contact: Optional[ContactSet]
    wall_time: float
    converged: bool
    message: str = ""
    extra: dict = field(default_factory=dict)

    def summary(self) -> dict:
        return {"iterations": self.iterations, "kkt_residual": float(self.kkt_residual),
                "converged": bool(self.converged), "message": self.message,
                "energy": float(self.energy_trace[-1]),
                "contact_cells": 0 if self.contact is None else len(self.contact),
                "wall_time": float(self.wall_time)}


# --------------------------------------------------------------------------
# generic projected descent


class _Problem:
    scale = 1.0  # gradient units -> residual units

    def energy(self, x): ...

    def grad(self, x): ...

    def hess(self, x):
        return None

    def project(self, x): ...

    def basis(self, x, g):
        """Sparse basis of the free directions at x (columns)."""
        return None

    def kkt(self, x, g): ...


_SLACK = 1e-13  # relative energy roundoff tolerated when the KKT residual improves


def _descend(prob: _Problem, x0, cfg: SolverConfig):
    x = prob.project(np.asarray(x0, dtype=float))
    E = prob.energy(x)
    trace = [E]
    tau = cfg.step_size
    converged, message = False, "max_iters reached"
    it = 0
    g = prob.grad(x)
    res = prob.kkt(x, g)
    stalls = 0
    for it in range(1, cfg.max_iters + 1):
        if res <= cfg.tol_kkt:
            converged, message = True, "kkt"
            it -= 1
            break
        x_new, E_new = None, None
        if cfg.newton:
            H = prob.hess(x)
            if H is not None:
                x_new, E_new = _newton_step(prob, x, g, E, res, H, cfg)
        if x_new is None:
            x_new, E_new, tau = _gradient_step(prob, x, g, E, tau, cfg)
        if x_new is None:
            message = "no descent step found"
            break
        dE = E - E_new
        x, E = x_new, E_new
        trace.append(E)
        g = prob.grad(x)
        res_new = prob.kkt(x, g)
        if dE <= cfg.tol_energy * max(1.0, abs(E)) and res_new >= 0.5 * res:
            stalls += 1
            if stalls >= 3:
                res = res_new
                message = "energy stagnation"
                break
        else:
            stalls = 0
        res = res_new
    if res <= cfg.tol_kkt:
        converged, message = True, "kkt"
    return x, np.array(trace), res, it, converged, message


def _armijo_ok(E_new, E, g, dx, c1):
    return E_new <= E + c1 * float(np.vdot(g, dx)) + 1e-15 * max(1.0, abs(E))


def _newton_step(prob, x, g, E, res, H, cfg):
    Z = prob.basis(x, g)
    if Z is None or Z.shape[1] == 0:
        return None, None
    ZT = Z.T.tocsr()
    Hr = ZT @ (ZT @ H.T).T
    gr = ZT @ g
    try:
        c = linalg.cho_factor(Hr, check_finite=False)
        y = -linalg.cho_solve(c, gr, check_finite=False)
    except linalg.LinAlgError:
        return None, None
    d = Z @ y
    alpha = 1.0
    for k in range(40):
        xn = prob.project(x + alpha * d)
        dx = xn - x
        if float(g @ dx) >= 0:
            alpha *= cfg.armijo_shrink
            continue
        En = prob.energy(xn)
        if _armijo_ok(En, E, g, dx, cfg.armijo_c1) and En < E:
            return xn, En
        if k == 0 and En <= E + _SLACK * max(1.0, abs(E)):
            # decrease below energy roundoff: judge the full step by the residual
            if prob.kkt(xn, prob.grad(xn)) < 0.5 * res:
                return xn, En
        alpha *= cfg.armijo_shrink
    return None, None


def _gradient_step(prob, x, g, E, tau, cfg):
    if cfg.step_rule == "fixed":
        xn = prob.project(x - cfg.step_size * g)
        En = prob.energy(xn)
        if En > E:
            return None, None, tau
        return xn, En, tau
    t = tau * 2.0
    for _ in range(80):
        xn = prob.project(x - t * g)
        dx = xn - x
        if not np.any(dx):
            t *= cfg.armijo_shrink
            continue
        En = prob.energy(xn)
        if _armijo_ok(En, E, g, dx, cfg.armijo_c1) and En < E:
            return xn, En, t
        t *= cfg.armijo_shrink
    return None, None, tau


def _selection(cols, n):
    cols = np.asarray(cols)
    return sparse.csr_matrix((np.ones(len(cols)), (cols, np.arange(len(cols)))),
                             shape=(n, len(cols)))


# --------------------------------------------------------------------------
# graph objectives


class _GraphEnergy:
    """s-perimeter part of a graph problem: quadratic J_s (times `qscale`) or the
    nonlinear column-integrated perimeter."""

    def __init__(self, op: GraphOperator, mode: str, qscale: float = 1.0):
        self.op = op
        self.mode = mode
        self.q = qscale
        self.hd = op.h ** op.d
        if mode == "quadratic":
            A, b = op.matrix
            self.A = -self.hd * qscale * A
            self.b = self.hd * qscale * b

    def energy(self, u):
        if self.mode == "quadratic":
            return self.q * self.op.Js(u)
        return self.op.pgraph(u)

    def grad(self, u):
        if self.mode == "quadratic":
            return self.A @ u - self.b
        return -self.hd * self.op.curvature_h(u)

    def hess(self, u):
        if self.mode == "quadratic":
            return self.A
        _, J = self.op.curvature_h(u, jacobian=True)
        return -self.hd * J

    def curvature(self, u):
        """Discrete curvature whose balance with the forcing is the Euler-Lagrange equation."""
        return -self.grad(u) / self.hd


class _ObstacleProblem(_Problem):
    def __init__(self, ge: _GraphEnergy, phi, f):
        self.ge, self.phi, self.f = ge, phi, f
        self.hd = ge.hd
        self.N = len(phi)

    def energy(self, u):
        return self.ge.energy(u) + self.hd * float(self.f @ u)

    def grad(self, u):
        return self.ge.grad(u) + self.hd * self.f

    def hess(self, u):
        return self.ge.hess(u)

    def project(self, u):
        return np.maximum(u, self.phi)

    def active(self, u, g):
        return (u - self.phi <= 1e-14 * (1 + np.abs(self.phi))) & (g > 0)

    def basis(self, u, g):
        return _selection(np.flatnonzero(~self.active(u, g)), self.N)

    def kkt(self, u, g):
        r = np.minimum(u - self.phi, g / self.hd)
        return float(np.max(np.abs(r))) if r.size else 0.0


def _initial_graph(grid: GraphFunction, exterior: ExteriorSpec):
    """Exterior data continued inside: the plane itself, or a blend of the boundary ring."""
    if exterior.is_plane():
        return exterior(grid.centers()).reshape(-1)
    h, R = grid.spacing, grid.radius
    op_pts = grid.centers().reshape(-1, grid.dim)
    # nearest boundary point value, pushed just outside the box
    nrm = np.max(np.abs(op_pts), axis=-1, keepdims=True)
    pts = op_pts / np.maximum(nrm, 1e-300) * (R + 0.5 * h)
    return exterior(pts)


def solve_fractional_obstacle(phi: Obstacle, exterior: ExteriorSpec, f: Optional[GraphFunction],
                              order: FractionalOrder, config: SolverConfig = SolverConfig(),
                              spec: Optional[KernelSpec] = None,
                              tol_contact: Optional[float] = None) -> SolveReport:
    """Minimize J_s(u) + int f u over {u >= phi} with u = exterior data outside the box."""
    if phi.graph is None:
        raise InputError("graph obstacle required")
    t0 = time.perf_counter()
    g0 = phi.graph
    grid = GraphFunction(g0.dim, g0.radius, g0.spacing, np.zeros_like(g0.values), exterior)
    if f is not None and f.values.shape != g0.values.shape:
        raise InputError("forcing must live on the obstacle grid")
    op = GraphOperator(grid, spec or KernelSpec(order, grid.spacing))
    ph = g0.values.reshape(-1)
    _check_compatibility(op, ph)
    fv = np.zeros(op.N) if f is None else f.values.reshape(-1)
    prob = _ObstacleProblem(_GraphEnergy(op, config.mode), ph, fv)
    x0 = np.maximum(_initial_graph(grid, exterior), ph)
    x, trace, res, it, ok, msg = _descend(prob, x0, config)
    u = grid.with_values(x.reshape(grid.values.shape))
    tc = default_tol_contact(grid.spacing, order) if tol_contact is None else tol_contact
    contact = contact_set_from_mask((x - ph <= tc).reshape(grid.values.shape), tc)
    return SolveReport(u, it, trace, res, contact, time.perf_counter() - t0, ok, msg,
                       {"exact_contact": int(np.sum(x == ph))})


def _check_compatibility(op: GraphOperator, phi):
    edge = np.any((op.multi == 0) | (op.multi == op.n - 1), axis=-1)
    ring = op.padded(np.zeros(op.N))
    if op.d == 1:
        outside = max(ring[0], ring[-1])
    else:
        outside = max(ring[0].max(), ring[-1].max(), ring[:, 0].max(), ring[:, -1].max())
    if np.any(phi[edge] > outside + 1e-12):
        warnings.warn("obstacle exceeds the exterior data near the boundary ring", stacklevel=3)


# --------------------------------------------------------------------------
# two membranes


def graph_area_hessian(v: GraphFunction) -> np.ndarray:
    """Dense Hessian of ``graph_area`` (exact in 1D, central differences of the gradient in 2D)."""
    N = v.values.size
    if v.dim == 1:
        from .energy import _padded_graph, _edge_weights
        P = _padded_graph(v)
        h = v.spacing
        q = np.diff(P) / h
        c = _edge_weights(v.n) * (1 + q * q) ** -1.5 / h
        H = np.zeros((N + 2, N + 2))
        i = np.arange(N + 1)
        H[i, i] += c
        H[i + 1, i + 1] += c
        H[i, i + 1] -= c
        H[i + 1, i] -= c
        return H[1:-1, 1:-1]
    H = np.empty((N, N))
    base = v.values.reshape(-1)
    eps = 1e-6
    for k in range(N):
        e = base.copy()
        e[k] += eps
        gp = graph_area_grad(v.with_values(e.reshape(v.values.shape))).reshape(-1)
        e[k] -= 2 * eps
        gm = graph_area_grad(v.with_values(e.reshape(v.values.shape))).reshape(-1)
        H[:, k] = (gp - gm) / (2 * eps)
    return 0.5 * (H + H.T)


class _MembraneProblem(_Problem):
    def __init__(self, ge: _GraphEnergy, vgrid: GraphFunction, f, g):
        self.ge, self.vgrid, self.f, self.g = ge, vgrid, f, g
        self.N = len(f)
        self.hd = ge.hd

    def split(self, x):
        return x[:self.N], x[self.N:]

    def _v(self, v):
        return self.vgrid.with_values(v.reshape(self.vgrid.values.shape))

    def energy(self, x):
        u, v = self.split(x)
        return (self.ge.energy(u) + graph_area(self._v(v))
                + self.hd * float(self.f @ u + self.g @ v))

    def grad(self, x):
        u, v = self.split(x)
        gu = self.ge.grad(u) + self.hd * self.f
        gv = graph_area_grad(self._v(v)).reshape(-1) + self.hd * self.g
        return np.concatenate([gu, gv])

    def hess(self, x):
        u, v = self.split(x)
        N = self.N
        H = np.zeros((2 * N, 2 * N))
        H[:N, :N] = self.ge.hess(u)
        H[N:, N:] = graph_area_hessian(self._v(v))
        return H

    def project(self, x):
        u, v = self.split(x)
        m = 0.5 * (u + v)
        over = v > u
        return np.concatenate([np.where(over, m, u), np.where(over, m, v)])

    def active(self, x, g):
        u, v = self.split(x)
        gu, gv = self.split(g)
        return (u - v <= 1e-14 * (1 + np.abs(u))) & (gu - gv > 0)

    def basis(self, x, g):
        N = self.N
        act = self.active(x, g)
        free = np.flatnonzero(~act)
        both = np.flatnonzero(act)
        rows = np.concatenate([free, free + N, both, both + N])
        m = 2 * len(free) + len(both)
        cols = np.concatenate([np.arange(len(free)), len(free) + np.arange(len(free)),
                               2 * len(free) + np.arange(len(both)),
                               2 * len(free) + np.arange(len(both))])
        return sparse.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(2 * N, m))

    def kkt(self, x, g):
        u, v = self.split(x)
        gu, gv = self.split(g)
        total = np.abs(gu + gv) / self.hd
        lam = 0.5 * (gu - gv) / self.hd
        comp = np.abs(np.minimum(u - v, lam))
        return float(max(total.max(), comp.max()))


def solve_two_membranes(u_exterior: ExteriorSpec, v_exterior: ExteriorSpec, f: GraphFunction,
                        g: GraphFunction, order: FractionalOrder,
                        config: SolverConfig = SolverConfig(mode="exact"),
                        spec: Optional[KernelSpec] = None,
                        tol_contact: Optional[float] = None) -> SolveReport:
    """Minimize P(u) + Area(v) + int (f u + g v) over v <= u with frozen exterior data.

    P is the nonlinear graph s-perimeter (mode 'exact') or its quadratic model
    2 J_s (mode 'quadratic').
    """
    t0 = time.perf_counter()
    if f.values.shape != g.values.shape or f.spacing != g.spacing or f.radius != g.radius:
        raise InputError("f and g must share one grid")
    ug = GraphFunction(f.dim, f.radius, f.spacing, np.zeros_like(f.values), u_exterior)
    vg = GraphFunction(f.dim, f.radius, f.spacing, np.zeros_like(f.values), v_exterior)
    op = GraphOperator(ug, spec or KernelSpec(order, ug.spacing))
    vop_ring = GraphOperator(vg, KernelSpec(order, ug.spacing, check_ring=False)).ghost_values
    if np.any(vop_ring > op.ghost_values + 1e-12):
        raise InputError("exterior data must satisfy v_ext <= u_ext on the boundary ring")
    ge = _GraphEnergy(op, config.mode, qscale=2.0)
    prob = _MembraneProblem(ge, vg, f.values.reshape(-1), g.values.reshape(-1))
    x0 = np.concatenate([_initial_graph(ug, u_exterior), _initial_graph(vg, v_exterior)])
    x, trace, res, it, ok, msg = _descend(prob, x0, config)
    u, v = prob.split(x)
    U = ug.with_values(u.reshape(ug.values.shape))
    V = vg.with_values(v.reshape(vg.values.shape))
    tc = default_tol_contact(ug.spacing, order) if tol_contact is None else tol_contact
    contact = contact_set_from_mask((u - v <= tc).reshape(ug.values.shape), tc)
    return SolveReport((U, V), it, trace, res, contact, time.perf_counter() - t0, ok, msg,
                       {"exact_contact": int(np.sum(u == v))})


# --------------------------------------------------------------------------
# s-minimal sets


class _SetProblem(_Problem):
    def __init__(self, se: SetEnergy, lo, free):
        self.se, self.lo, self.free = se, lo, free
        self.hn = se.hn

    def energy(self, x):
        return self.se.energy(x)

    def grad(self, x):
        return np.where(self.free, self.se.gradient(x), 0.0)

    def project(self, x):
        return np.where(self.free, np.clip(x, self.lo, 1.0), x)

    def kkt(self, x, g):
        r = np.where(x <= self.lo, np.maximum(0, -g), np.where(x >= 1, np.maximum(0, g), np.abs(g)))
        return float(np.max(np.where(self.free, r, 0.0))) / self.hn


def _flip_polish(se: SetEnergy, theta, free, lo, max_flips=100000):
    th = theta.copy()
    g = se.gradient(th)
    T = se.pairs.table
    shape = th.shape
    flips = 0
    scale = 1e-14 * max(1.0, abs(se.energy(th)))
    while flips < max_flips:
        target = np.where(th >= 0.5, lo, 1.0)
        delta = np.where(free, target - th, 0.0)
        gain = g * delta
        k = np.unravel_index(int(np.argmin(gain)), shape)
        if gain[k] >= -scale:
            break
        d = delta[k]
        th[k] += d
        sl = tuple(slice(m - 1 - kk, 2 * m - 1 - kk) for m, kk in zip(shape, k))
        g = g - 2.0 * d * T[sl]
        flips += 1
    return th, flips


def solve_s_minimal_set(obstacle: Obstacle, exterior: IndicatorGrid, order: FractionalOrder,
                        config: SolverConfig = SolverConfig(newton=False), window=None) -> SolveReport:
    """Minimize the relaxed s-perimeter in the window over chi_O <= theta <= 1, then threshold.

    ``exterior`` carries the frozen data: its cells outside the window and its
    exterior rule beyond the box.  Several starts are relaxed, thresholded at
    1/2 and polished by single-cell flips; the lowest energy wins.
    """
    t0 = time.perf_counter()
    if obstacle.set is None:
        raise InputError("set obstacle required")
    O = obstacle.set
    if not O.compatible(exterior):
        raise InputError("obstacle and exterior must share one grid")
    se = SetEnergy(exterior, order, window)
    omega = se.omega
    obst = (np.asarray(O.cells) >= 0.5) & omega
    outside_bad = (~omega) & (np.asarray(O.cells) >= 0.5) & (np.asarray(exterior.cells) < 0.5)
    if np.any(outside_bad):
        raise InputError("obstacle protrudes into the frozen exterior complement")
    free = omega & ~obst
    lo = np.where(obst, 1.0, 0.0)
    base = np.where(omega, np.maximum(lo, exterior.cells), exterior.cells)
    starts = [base, np.where(free, 1.0, base), np.where(free, 0.0, base), np.where(free, 0.5, base)]
    rng = np.random.default_rng(config.seed)
    for _ in range(config.restarts):
        starts.append(np.where(free, rng.random(base.shape), base))
    prob = _SetProblem(se, lo, free)
    cfg = config if not config.newton else SolverConfig(**{**config.__dict__, "newton": False})
    best = None
    runs = []
    for k, x0 in enumerate(starts):
        x, trace, res, it, ok, msg = _descend(prob, x0, cfg)
        relaxed_E = trace[-1]
        sharp = np.where(free, (x >= 0.5).astype(float), x)
        sharp = np.where(obst, 1.0, sharp)
        thresh_E = se.energy(sharp)
        polished, flips = _flip_polish(se, sharp, free, lo)
        E = se.energy(polished)
        runs.append({"start": k, "relaxed": relaxed_E, "thresholded": thresh_E, "final": E,
                     "iterations": it, "flips": flips})
        if best is None or E < best[0] - 1e-15 * max(1.0, abs(E)):
            best = (E, polished, trace, res, it, ok, msg, relaxed_E, thresh_E)
    E, th, trace, res, it, ok, msg, relaxed_E, thresh_E = best
    gap = E - relaxed_E
    flagged = gap > config.tol_energy * max(1.0, abs(relaxed_E)) + 1e-12
    if flagged:
        msg = "relaxation gap: sharp energy above the relaxed minimum"
    result = exterior.with_cells(th)
    g = prob.grad(th)
    res = prob.kkt(th, g)
    ok = res <= config.tol_kkt and not flagged
    if not ok and not flagged:
        msg = "sharp set is not a discrete local minimum"
    return SolveReport(result, it, np.append(trace, E) if E <= trace[-1] else trace, res, None,
                       time.perf_counter() - t0, ok, msg,
                       {"runs": runs, "relaxation_gap": gap, "energy": E})
