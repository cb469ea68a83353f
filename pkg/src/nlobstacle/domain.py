"""Grids, graph functions, indicator sets and fractional-order parameters.

All grids are cell centred and uniform.  A graph function lives on the box
``[-R, R]^d`` (d = 1, 2) and carries an explicit exterior datum; an indicator
grid lives on an arbitrary axis-aligned box in dimension n = 2, 3 and carries
an exterior rule used outside the box.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.interpolate import RegularGridInterpolator

from .errors import InputError, UnsupportedExteriorError

__all__ = [
    "FractionalOrder", "ExteriorSpec", "GraphFunction", "ExteriorRule",
    "IndicatorGrid", "Obstacle", "ContactSet", "evaluate", "indicator_at",
    "subgraph", "height_function", "contact_set_from_mask",
    "dump_grid", "load_grid", "format_real",
]


def format_real(x: float) -> str:
    return "%.17g" % float(x)


@dataclass(frozen=True)
class FractionalOrder:
    """s in (0, 1/2) with the derived operator order sbar = 1/2 + s."""

    s: float

    def __post_init__(self):
        s = float(self.s)
        if not (0.0 < s < 0.5) or not np.isfinite(s):
            raise InputError(f"fractional order s must lie in (0, 1/2), got {self.s!r}")
        object.__setattr__(self, "s", s)

    @property
    def sbar(self) -> float:
        return 0.5 + self.s

    @property
    def sigma_am(self) -> float:
        # almost-minimality exponent: 2*sigma = 1 - 2s
        return (1.0 - 2.0 * self.s) / 2.0

    def kernel_exponent(self, n: int) -> float:
        """Exponent n + 2s of the kernel in ambient dimension n."""
        return n + 2.0 * self.s


# --------------------------------------------------------------------------
# graph exteriors

_SAFE_NAMES = {
    name: getattr(np, name)
    for name in ("sin", "cos", "exp", "sqrt", "abs", "maximum", "minimum",
                 "pi", "where", "tanh", "log", "clip")
}


def eval_expr(expr: str, pts: np.ndarray) -> np.ndarray:
    """Evaluate a numpy expression in ``x`` (1D) or ``x, y`` (2D) at points."""
    pts = np.asarray(pts, dtype=float)
    env = dict(_SAFE_NAMES)
    env["x"] = pts[..., 0]
    if pts.shape[-1] > 1:
        env["y"] = pts[..., 1]
    env["r"] = np.sqrt(np.sum(pts ** 2, axis=-1))
    try:
        out = eval(expr, {"__builtins__": {}}, env)
    except Exception as exc:  # noqa: BLE001 - reported as input error
        raise InputError(f"cannot evaluate expression {expr!r}: {exc}") from exc
    return np.broadcast_to(np.asarray(out, dtype=float), pts.shape[:-1]).copy()


@dataclass(frozen=True)
class ExteriorSpec:
    """Exterior datum of a graph function.

    kind is one of ``zero``, ``plane``, ``samples`` or ``obstacle``.  The two
    last kinds are bounded data inside ``outer_radius`` (box norm) and the
    plane ``slope . x + offset`` beyond it.
    """

    kind: str = "zero"
    slope: tuple = ()
    offset: float = 0.0
    samples: Optional[np.ndarray] = None
    sample_spacing: float = 0.0
    outer_radius: float = 0.0
    expr: str = ""

    def __post_init__(self):
        if self.kind not in ("zero", "plane", "samples", "obstacle"):
            raise InputError(f"unknown exterior kind {self.kind!r}")
        object.__setattr__(self, "slope", tuple(float(a) for a in self.slope))
        object.__setattr__(self, "offset", float(self.offset))
        if self.kind in ("samples", "obstacle"):
            if not (np.isfinite(self.outer_radius) and self.outer_radius > 0):
                raise UnsupportedExteriorError(
                    f"{self.kind} exterior needs a finite outer radius beyond which it is a plane")
        if self.kind == "samples":
            if self.samples is None or self.sample_spacing <= 0:
                raise InputError("samples exterior needs a coarse sample array and spacing")
            arr = np.array(self.samples, dtype=float)
            arr.setflags(write=False)
            object.__setattr__(self, "samples", arr)
        if self.kind == "obstacle" and not self.expr:
            raise InputError("obstacle exterior needs an expression")

    @classmethod
    def zero(cls):
        return cls("zero")

    @classmethod
    def plane(cls, slope, offset=0.0):
        return cls("plane", slope=tuple(np.atleast_1d(slope)), offset=offset)

    def tail_slope(self, dim: int) -> np.ndarray:
        if self.kind == "zero" or not self.slope:
            return np.zeros(dim)
        if len(self.slope) != dim:
            raise InputError(f"exterior slope has length {len(self.slope)}, expected {dim}")
        return np.asarray(self.slope)

    def is_plane(self) -> bool:
        return self.kind in ("zero", "plane")

    def __call__(self, pts) -> np.ndarray:
        """Evaluate at points of shape (..., dim)."""
        pts = np.asarray(pts, dtype=float)
        dim = pts.shape[-1]
        plane = pts @ self.tail_slope(dim) + (0.0 if self.kind == "zero" else self.offset)
        if self.is_plane():
            return plane
        inner = np.max(np.abs(pts), axis=-1) <= self.outer_radius
        out = np.array(plane, dtype=float, copy=True)
        if not np.any(inner):
            return out
        if self.kind == "obstacle":
            out[inner] = eval_expr(self.expr, pts[inner])
        else:
            H = self.sample_spacing
            m = self.samples.shape[0]
            axis = -self.outer_radius + H * np.arange(m)
            interp = RegularGridInterpolator((axis,) * dim, self.samples,
                                             bounds_error=False, fill_value=None)
            out[inner] = interp(pts[inner])
        return out

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "slope": list(self.slope), "offset": self.offset}
        if self.kind == "samples":
            d.update(samples=self.samples.tolist(), sample_spacing=self.sample_spacing,
                     outer_radius=self.outer_radius)
        if self.kind == "obstacle":
            d.update(expr=self.expr, outer_radius=self.outer_radius)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExteriorSpec":
        d = dict(d)
        if "samples" in d:
            d["samples"] = np.asarray(d["samples"], dtype=float)
        d["slope"] = tuple(d.get("slope", ()))
        return cls(**d)


@dataclass(frozen=True, eq=False)
class GraphFunction:
    """Samples of u on the cell centres of [-R, R]^dim plus an exterior datum."""

    dim: int
    radius: float
    spacing: float
    values: np.ndarray
    exterior: ExteriorSpec = field(default_factory=ExteriorSpec)

    def __post_init__(self):
        if self.dim not in (1, 2):
            raise InputError(f"graph dimension must be 1 or 2, got {self.dim}")
        if not (self.spacing > 0 and self.radius > 0):
            raise InputError("radius and spacing must be positive")
        n = self.cells_per_axis(self.radius, self.spacing)
        vals = np.array(self.values, dtype=float)
        if vals.shape != (n,) * self.dim:
            raise InputError(f"expected {(n,) * self.dim} samples, got {vals.shape}")
        if not np.all(np.isfinite(vals)):
            raise InputError("graph values must be finite")
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)
        if not isinstance(self.exterior, ExteriorSpec):
            raise InputError("exterior must be an ExteriorSpec")

    @staticmethod
    def cells_per_axis(radius: float, spacing: float) -> int:
        q = 2.0 * radius / spacing
        n = int(round(q))
        if n < 1 or abs(q - n) > 1e-6 * max(1.0, q):
            raise InputError(f"2R/h = {q} is not an integer")
        return n

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def axis(self) -> np.ndarray:
        return -self.radius + self.spacing * (np.arange(self.n) + 0.5)

    def centers(self) -> np.ndarray:
        """Cell centres, shape values.shape + (dim,)."""
        ax = self.axis
        if self.dim == 1:
            return ax[:, None]
        X, Y = np.meshgrid(ax, ax, indexing="ij")
        return np.stack([X, Y], axis=-1)

    def with_values(self, values) -> "GraphFunction":
        return GraphFunction(self.dim, self.radius, self.spacing, values, self.exterior)

    @classmethod
    def from_function(cls, func, dim, radius, spacing, exterior=None):
        ext = exterior if exterior is not None else ExteriorSpec.zero()
        n = cls.cells_per_axis(radius, spacing)
        ax = -radius + spacing * (np.arange(n) + 0.5)
        if dim == 1:
            pts = ax[:, None]
        else:
            X, Y = np.meshgrid(ax, ax, indexing="ij")
            pts = np.stack([X, Y], axis=-1)
        vals = func(pts) if callable(func) else eval_expr(func, pts)
        return cls(dim, radius, spacing, np.asarray(vals, dtype=float), ext)

    def evaluate(self, pts) -> np.ndarray:
        pts = np.asarray(pts, dtype=float)
        if self.dim == 1 and (pts.ndim == 0 or pts.shape[-1] != 1):
            pts = pts[..., None]
        if pts.shape[-1] != self.dim:
            raise InputError(f"points must have trailing dimension {self.dim}")
        if not np.all(np.isfinite(pts)):
            raise InputError("evaluation point is not finite")
        inside = np.max(np.abs(pts), axis=-1) <= self.radius
        out = np.empty(pts.shape[:-1])
        if np.any(~inside):
            out[~inside] = self.exterior(pts[~inside])
        if np.any(inside):
            if self.n == 1:
                out[inside] = self.values.reshape(-1)[0]
            else:
                interp = RegularGridInterpolator((self.axis,) * self.dim, self.values,
                                                 bounds_error=False, fill_value=None)
                out[inside] = interp(pts[inside])
        return out


def evaluate(f: GraphFunction, x) -> float:
    """Multilinear interpolation inside the box, exterior datum outside."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    return float(f.evaluate(x[None, :])[0])


# --------------------------------------------------------------------------
# indicator grids

@dataclass(frozen=True)
class ExteriorRule:
    """Set outside an indicator grid box: ``halfspace`` {x.e < offset}, ``empty`` or ``full``."""

    kind: str = "halfspace"
    normal: tuple = ()
    offset: float = 0.0

    def __post_init__(self):
        if self.kind not in ("halfspace", "empty", "full"):
            raise InputError(f"unknown exterior rule {self.kind!r}")
        if self.kind == "halfspace":
            e = np.asarray(self.normal, dtype=float)
            nrm = np.linalg.norm(e)
            if e.size == 0 or nrm == 0:
                raise InputError("half-space exterior needs a nonzero normal")
            if abs(nrm - 1.0) > 4 * np.finfo(float).eps:  # keep unit normals bit-exact
                e = e / nrm
            object.__setattr__(self, "normal", tuple(float(a) for a in e))
        object.__setattr__(self, "offset", float(self.offset))

    @classmethod
    def halfspace(cls, normal, offset=0.0):
        return cls("halfspace", tuple(normal), offset)

    def complement(self) -> "ExteriorRule":
        if self.kind == "empty":
            return ExteriorRule("full")
        if self.kind == "full":
            return ExteriorRule("empty")
        return ExteriorRule("halfspace", tuple(-a for a in self.normal), -self.offset)

    def __call__(self, pts) -> np.ndarray:
        pts = np.asarray(pts, dtype=float)
        if self.kind == "empty":
            return np.zeros(pts.shape[:-1])
        if self.kind == "full":
            return np.ones(pts.shape[:-1])
        return (pts @ np.asarray(self.normal) < self.offset).astype(float)

    def to_dict(self):
        return {"kind": self.kind, "normal": list(self.normal), "offset": self.offset}


@dataclass(frozen=True, eq=False)
class IndicatorGrid:
    """Relaxed indicator theta in [0, 1] on the cells of an axis-aligned box."""

    lo: np.ndarray
    spacing: float
    cells: np.ndarray
    exterior: ExteriorRule = field(default_factory=lambda: ExteriorRule("empty"))

    def __post_init__(self):
        cells = np.array(self.cells, dtype=float)
        lo = np.array(self.lo, dtype=float)
        if cells.ndim not in (2, 3):
            raise InputError(f"indicator grids are 2D or 3D, got ndim={cells.ndim}")
        if lo.shape != (cells.ndim,):
            raise InputError("box corner must match grid dimension")
        if not self.spacing > 0:
            raise InputError("spacing must be positive")
        if np.any(cells < 0) or np.any(cells > 1) or not np.all(np.isfinite(cells)):
            raise InputError("indicator values must lie in [0, 1]")
        if self.exterior.kind == "halfspace" and len(self.exterior.normal) != cells.ndim:
            raise InputError("half-space normal dimension mismatch")
        cells.setflags(write=False)
        lo.setflags(write=False)
        object.__setattr__(self, "cells", cells)
        object.__setattr__(self, "lo", lo)

    @property
    def dim(self) -> int:
        return self.cells.ndim

    @property
    def shape(self):
        return self.cells.shape

    @property
    def hi(self) -> np.ndarray:
        return self.lo + self.spacing * np.asarray(self.shape)

    @property
    def is_sharp(self) -> bool:
        return bool(np.all((self.cells == 0) | (self.cells == 1)))

    def axes(self):
        return [self.lo[a] + self.spacing * (np.arange(m) + 0.5) for a, m in enumerate(self.shape)]

    def centers(self) -> np.ndarray:
        grids = np.meshgrid(*self.axes(), indexing="ij")
        return np.stack(grids, axis=-1)

    def with_cells(self, cells) -> "IndicatorGrid":
        return IndicatorGrid(self.lo, self.spacing, cells, self.exterior)

    def complement(self) -> "IndicatorGrid":
        return IndicatorGrid(self.lo, self.spacing, 1.0 - self.cells, self.exterior.complement())

    def compatible(self, other: "IndicatorGrid") -> bool:
        return (self.shape == other.shape and np.allclose(self.lo, other.lo, atol=1e-12)
                and abs(self.spacing - other.spacing) < 1e-14 * self.spacing)

    @classmethod
    def from_function(cls, func, lo, hi, spacing, exterior=None):
        lo = np.asarray(lo, dtype=float)
        hi = np.asarray(hi, dtype=float)
        q = (hi - lo) / spacing
        shape = tuple(int(round(v)) for v in q)
        if np.any(np.abs(q - np.asarray(shape)) > 1e-6):
            raise InputError("box extent is not a multiple of the spacing")
        axes = [lo[a] + spacing * (np.arange(m) + 0.5) for a, m in enumerate(shape)]
        pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
        cells = np.asarray(func(pts), dtype=float)
        return cls(lo, spacing, cells, exterior if exterior is not None else ExteriorRule("empty"))

    def value_at(self, pts) -> np.ndarray:
        pts = np.asarray(pts, dtype=float)
        if not np.all(np.isfinite(pts)):
            raise InputError("point is not finite")
        idx = np.floor((pts - self.lo) / self.spacing).astype(int)
        inside = np.all((idx >= 0) & (idx < np.asarray(self.shape)), axis=-1)
        out = np.empty(pts.shape[:-1])
        if np.any(inside):
            out[inside] = self.cells[tuple(idx[inside].T)]
        if np.any(~inside):
            out[~inside] = self.exterior(pts[~inside])
        return out


def indicator_at(E: IndicatorGrid, x) -> float:
    x = np.asarray(x, dtype=float)
    if x.shape != (E.dim,):
        raise InputError(f"point must have {E.dim} coordinates")
    return float(E.value_at(x[None, :])[0])


def subgraph(u: GraphFunction, height_lo: float, height_hi: float) -> IndicatorGrid:
    """Rasterize {x_n < u(x')} on the box [-R, R]^d x [height_lo, height_hi]."""
    h = u.spacing
    m = int(round((height_hi - height_lo) / h))
    if m < 1 or abs((height_hi - height_lo) / h - m) > 1e-6:
        raise InputError("vertical extent must be a positive multiple of the spacing")
    zc = height_lo + h * (np.arange(m) + 0.5)
    vals = u.values[..., None]
    cells = (zc < vals).astype(float)
    lo = np.concatenate([np.full(u.dim, -u.radius), [height_lo]])
    ext = u.exterior
    a = ext.tail_slope(u.dim)
    b = 0.0 if ext.kind == "zero" else ext.offset
    # {x_n - a.x' < b}
    normal = np.concatenate([-a, [1.0]])
    nrm = np.linalg.norm(normal)
    return IndicatorGrid(lo, h, cells, ExteriorRule("halfspace", tuple(normal / nrm), b / nrm))


def height_function(E: IndicatorGrid, exterior: Optional[ExteriorSpec] = None) -> GraphFunction:
    """Recover the graph of a subgraph-like grid by counting filled cells per column."""
    h = E.spacing
    d = E.dim - 1
    widths = E.hi[:d] - E.lo[:d]
    if not np.allclose(E.lo[:d], -widths / 2) or not np.allclose(widths, widths[0]):
        raise InputError("horizontal box must be a centred cube [-R, R]^d")
    count = np.sum(E.cells >= 0.5, axis=-1)
    vals = E.lo[-1] + h * count
    return GraphFunction(d, widths[0] / 2, h, vals, exterior or ExteriorSpec.zero())


# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Obstacle:
    graph: Optional[GraphFunction] = None
    set: Optional[IndicatorGrid] = None
    c1alpha_seminorm: Optional[float] = None
    alpha: Optional[float] = None

    def __post_init__(self):
        if (self.graph is None) == (self.set is None):
            raise InputError("an obstacle is either a graph or a set, exactly one")
        if self.alpha is not None:
            if not (0 < self.alpha <= 1):
                raise InputError("alpha must lie in (0, 1]")
            if self.c1alpha_seminorm is None or self.c1alpha_seminorm < 0:
                raise InputError("C^{1,alpha} seminorm must be given and nonnegative")


@dataclass(frozen=True)
class ContactSet:
    """Active cells (index tuples) and the subset adjacent to inactive cells."""

    indices: tuple
    tol_contact: float
    boundary_indices: tuple
    shape: tuple = ()

    def mask(self) -> np.ndarray:
        m = np.zeros(self.shape, dtype=bool)
        for idx in self.indices:
            m[idx] = True
        return m

    def __len__(self):
        return len(self.indices)


def contact_set_from_mask(mask: np.ndarray, tol_contact: float) -> ContactSet:
    mask = np.asarray(mask, dtype=bool)
    active = [tuple(int(i) for i in idx) for idx in np.argwhere(mask)]
    boundary = []
    for idx in active:
        for ax in range(mask.ndim):
            for step in (-1, 1):
                nb = list(idx)
                nb[ax] += step
                if 0 <= nb[ax] < mask.shape[ax] and not mask[tuple(nb)]:
                    boundary.append(idx)
                    break
            else:
                continue
            break
    return ContactSet(tuple(active), float(tol_contact), tuple(boundary), mask.shape)


def default_tol_contact(h: float, order: FractionalOrder) -> float:
    return 10.0 * h ** (1.0 + order.sbar)


# --------------------------------------------------------------------------
# text serialization

_MAGIC = "# nlobstacle-grid"


def dump_grid(obj, path) -> None:
    """Header line with JSON metadata, then one sample per line, row-major."""
    if isinstance(obj, GraphFunction):
        meta = {"type": "graph", "dim": obj.dim, "radius": format_real(obj.radius),
                "spacing": format_real(obj.spacing), "shape": list(obj.values.shape),
                "exterior": obj.exterior.to_dict()}
        data = obj.values
    elif isinstance(obj, IndicatorGrid):
        meta = {"type": "indicator", "dim": obj.dim, "lo": [format_real(v) for v in obj.lo],
                "spacing": format_real(obj.spacing), "shape": list(obj.shape),
                "exterior": obj.exterior.to_dict()}
        data = obj.cells
    else:
        raise InputError(f"cannot serialize {type(obj).__name__}")
    with open(path, "w") as fh:
        fh.write(_MAGIC + " " + json.dumps(meta, sort_keys=True) + "\n")
        for v in np.asarray(data).reshape(-1):
            fh.write(format_real(v) + "\n")


def load_grid(path):
    with open(path) as fh:
        header = fh.readline()
        if not header.startswith(_MAGIC):
            raise InputError(f"{path}: not a grid file")
        meta = json.loads(header[len(_MAGIC):])
        data = np.array([float(line) for line in fh if line.strip()], dtype=float)
    shape = tuple(meta["shape"])
    if data.size != int(np.prod(shape)):
        raise InputError(f"{path}: expected {np.prod(shape)} samples, found {data.size}")
    data = data.reshape(shape)
    if meta["type"] == "graph":
        return GraphFunction(int(meta["dim"]), float(meta["radius"]), float(meta["spacing"]),
                             data, ExteriorSpec.from_dict(meta["exterior"]))
    ext = ExteriorRule(**meta["exterior"])
    return IndicatorGrid(np.array([float(v) for v in meta["lo"]]), float(meta["spacing"]),
                         data, ext)
