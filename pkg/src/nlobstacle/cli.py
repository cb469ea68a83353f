"""Command-line front end: run experiments, compare against oracles, sweep parameters."""
from __future__ import annotations

import argparse
import configparser
import copy
import hashlib
import json
import os
import platform
import re
import sys
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from typing import Optional

import numpy as np

from . import __version__
from .analysis import (almost_minimality_audit, csv_text, euler_lagrange_residual,
                       fit_detachment_exponent, flatness_decay, holder_seminorm,
                       regular_point_test, unit_ball_interaction)
from .domain import (ExteriorRule, ExteriorSpec, FractionalOrder, GraphFunction, IndicatorGrid,
                     Obstacle, dump_grid, format_real, load_grid, subgraph)
from .energy import SetEnergy, graph_quadratic_energy
from .errors import (ConfigurationError, InputError, NLObstacleError, OracleRefusal)
from .kernels import face_point
from .oracle import exhaustive_active_set, exhaustive_set_min
from .solvers import (SolverConfig, solve_fractional_obstacle, solve_s_minimal_set,
                      solve_two_membranes)

EXIT_OK, EXIT_INPUT, EXIT_FAILED, EXIT_REFUSAL = 0, 1, 2, 3
PROBLEMS = ("FractionalObstacle", "TwoMembranes", "SMinimalSet")
SWEEP_PARAMS = ("s", "h", "forcing", "obstacle")


# --------------------------------------------------------------------------
# configuration


def _num(text, h: Optional[float] = None) -> float:
    """A number written as arithmetic: ``2^-10``, ``1/16``, ``4h`` (with h the spacing)."""
    if isinstance(text, (int, float)):
        return float(text)
    t = str(text).strip().replace("^", "**")
    if h is not None:
        t = re.sub(r"(?<=[0-9.)])\s*h\b", "*h", t)
    if not t or not re.fullmatch(r"[0-9eE.+\-*/() h]+", t) or ("h" in t and h is None):
        raise ConfigurationError(f"not a number: {text!r}")
    try:
        return float(eval(t, {"__builtins__": {}}, {"h": h}))  # noqa: S307 - filtered above
    except Exception as exc:  # noqa: BLE001
        raise ConfigurationError(f"not a number: {text!r}") from exc


def _vec(text, h=None) -> list:
    if isinstance(text, (list, tuple)):
        return [_num(v, h) for v in text]
    return [_num(v, h) for v in str(text).split(",") if v.strip()]


def _flag(sec: dict, key: str, default=False) -> bool:
    v = sec.get(key)
    if v is None:
        return default
    return str(v).strip().lower() in ("1", "true", "yes", "on")


@dataclass
class ExperimentConfig:
    problem: str
    order: FractionalOrder
    dim: int
    radius: float
    spacing: float
    sections: dict
    solver: SolverConfig
    analyses: list
    output_dir: str
    seed: int = 0
    tol_contact: Optional[float] = None
    source: str = ""
    base_dir: str = "."
    name: str = ""

    def section(self, name: str) -> dict:
        return self.sections.get(name, {})

    def digest(self) -> str:
        return hashlib.sha256(self.source.encode()).hexdigest()


def preset_names() -> list:
    return sorted(p.name[:-4] for p in resources.files("nlobstacle.presets").iterdir()
                  if p.name.endswith(".ini"))


def _locate(path: str) -> tuple:
    """(text, directory, suffix) of a config file or a shipped preset."""
    if os.path.isfile(path):
        with open(path) as fh:
            return fh.read(), os.path.dirname(os.path.abspath(path)), os.path.splitext(path)[1]
    name = os.path.basename(path)
    if name.endswith(".ini"):
        name = name[:-4]
    res = resources.files("nlobstacle.presets") / f"{name}.ini"
    if res.is_file():
        return res.read_text(), ".", ".ini"
    raise InputError(f"no config file or preset named {path!r}")


def _parse(text: str, suffix: str) -> dict:
    if suffix == ".json" or text.lstrip().startswith("{"):
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise InputError(f"invalid JSON config: {exc}") from exc
        if not isinstance(raw, dict) or not all(isinstance(v, dict) for v in raw.values()):
            raise InputError("JSON config must map section names to objects")
        return {k: {kk: vv for kk, vv in v.items()} for k, v in raw.items()}
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise InputError(f"invalid config: {exc}") from exc
    return {s: dict(cp[s]) for s in cp.sections()}


def config_from_sections(sections: dict, source: str = "", base_dir: str = ".",
                         output_dir: Optional[str] = None, seed: Optional[int] = None) -> ExperimentConfig:
    exp = sections.get("experiment")
    if exp is None:
        raise InputError("config needs an [experiment] section")
    problem = str(exp.get("problem", ""))
    if problem not in PROBLEMS:
        raise InputError(f"problem must be one of {PROBLEMS}, got {problem!r}")
    order = FractionalOrder(_num(exp.get("s", "")))
    dim = int(_num(exp.get("dim", 1)))
    radius = _num(exp.get("radius", 1))
    h = _num(exp.get("spacing", ""))
    sol = dict(sections.get("solver", {}))
    tc = sol.pop("tol_contact", None)
    tc = None if tc is None else _num(tc, h)
    s_seed = int(_num(seed if seed is not None else exp.get("seed", 0)))
    sol.setdefault("seed", s_seed)
    if seed is not None:
        sol["seed"] = s_seed
    solver = SolverConfig.from_mapping({k: str(v) for k, v in sol.items()})
    an = sections.get("analysis", {})
    analyses = [k for k in ("detachment", "separation", "regular_point", "holder", "el_residual",
                            "almost_minimality", "flatness") if _flag(an, k)]
    cfg = ExperimentConfig(problem, order, dim, radius, h, sections, solver, analyses,
                           output_dir or str(exp.get("output_dir", "out")), s_seed, tc, source,
                           base_dir, str(exp.get("name", "")))
    # every referenced file must exist before any computation
    for sec in sections.values():
        ref = sec.get("file")
        if ref is not None and not os.path.isfile(os.path.join(base_dir, str(ref))):
            raise InputError(f"referenced file {ref!r} does not exist")
    return cfg


def load_config(path: str, output_dir: Optional[str] = None, seed: Optional[int] = None) -> ExperimentConfig:
    text, base, suffix = _locate(path)
    return config_from_sections(_parse(text, suffix), text, base, output_dir, seed)


# --------------------------------------------------------------------------
# building inputs


def _graph(cfg: ExperimentConfig, sec: dict, key: str = "expr", exterior=None, scale=1.0) -> GraphFunction:
    if "file" in sec and key == "expr":
        g = load_grid(os.path.join(cfg.base_dir, sec["file"]))
        if not isinstance(g, GraphFunction):
            raise InputError(f"{sec['file']} is not a graph")
        return g
    expr = sec.get(key)
    if expr is None:
        raise InputError(f"missing expression {key!r}")
    return GraphFunction.from_function(f"({scale})*({expr})", cfg.dim, cfg.radius, cfg.spacing,
                                       exterior)


def _exterior(sec: dict, dim: int) -> ExteriorSpec:
    kind = sec.get("kind", "zero")
    if kind == "zero":
        return ExteriorSpec.zero()
    if kind == "plane":
        slope = _vec(sec.get("slope", ",".join(["0"] * dim)))
        return ExteriorSpec.plane(tuple(slope), _num(sec.get("offset", 0)))
    if kind == "obstacle":
        slope = _vec(sec.get("slope", ",".join(["0"] * dim)))
        return ExteriorSpec("obstacle", slope=tuple(slope), offset=_num(sec.get("offset", 0)),
                            outer_radius=_num(sec.get("outer_radius", "")), expr=sec.get("expr", ""))
    raise InputError(f"unsupported exterior kind {kind!r} in a config file")


def _rule(sec: dict) -> ExteriorRule:
    kind = sec.get("exterior", "halfspace")
    if kind == "halfspace":
        return ExteriorRule.halfspace(tuple(_vec(sec.get("normal", ""))), _num(sec.get("offset", 0)))
    return ExteriorRule(kind)


# --------------------------------------------------------------------------
# execution


@dataclass
class Outcome:
    status: int
    message: str
    files: dict = field(default_factory=dict)  # name -> text
    metrics: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)


def _record(d: dict) -> str:
    out = []
    for k, v in d.items():
        if isinstance(v, (float, np.floating)):
            v = format_real(v)
        out.append(f"{k}={v}\n")
    return "".join(out)


def _grid_text(obj) -> str:
    import tempfile
    with tempfile.TemporaryDirectory() as d:
        p = os.path.join(d, "g")
        dump_grid(obj, p)
        with open(p) as fh:
            return fh.read()


def _report(rep, extra: dict) -> str:
    d = rep.summary()
    d.pop("wall_time", None)
    d.update(extra)
    return _record(d)


def _window(an: dict, key: str, h: float):
    if key not in an:
        return None
    lo, hi = _vec(an[key], h)
    return (lo, hi)


def _fit_rows(name, fits, target, tol):
    rows, summary = [], []
    for pt, fit in fits:
        label = "-".join(map(str, pt))
        for r in fit.rows():
            rows.append({"point": label, **r})
        summary.append({"point": label, "slope": fit.slope, "intercept": fit.intercept,
                        "r_squared": fit.r_squared, "r_min": fit.window[0], "r_max": fit.window[1],
                        "target": target, "within_target": int(abs(fit.slope - target) <= tol)})
    return {f"{name}.csv": csv_text(rows, ["point", "radius", "value", "slope_window_flag"]),
            f"{name}_fit.csv": csv_text(summary, ["point", "slope", "intercept", "r_squared", "r_min",
                                                  "r_max", "target", "within_target"])}


def _run_obstacle(cfg: ExperimentConfig, scale_f=1.0, scale_phi=1.0) -> Outcome:
    ext = _exterior(cfg.section("exterior"), cfg.dim)
    phi = _graph(cfg, cfg.section("obstacle"), scale=scale_phi)
    fsec = cfg.section("forcing")
    f = _graph(cfg, fsec, "f", scale=scale_f) if "f" in fsec else None
    t = time.perf_counter()
    rep = solve_fractional_obstacle(Obstacle(graph=phi), ext, f, cfg.order, cfg.solver,
                                    tol_contact=cfg.tol_contact)
    out = Outcome(EXIT_OK if rep.converged else EXIT_FAILED, rep.message)
    out.timings["solve"] = time.perf_counter() - t
    u = rep.solution
    out.files["report.txt"] = _report(rep, {"exact_contact": rep.extra["exact_contact"],
                                            "tol_contact": rep.contact.tol_contact})
    out.files["u.grid"] = _grid_text(u)
    out.metrics.update(converged=int(rep.converged), iterations=rep.iterations,
                       energy=float(rep.energy_trace[-1]), contact_cells=len(rep.contact))
    an = cfg.section("analysis")
    if "detachment" in cfg.analyses:
        t = time.perf_counter()
        win = _window(an, "detachment_window", cfg.spacing)
        fits = [(pt, fit_detachment_exponent(u, phi, pt, window=win))
                for pt in rep.contact.boundary_indices]
        target = 1 + cfg.order.sbar
        out.files.update(_fit_rows("detachment", fits, target, _num(an.get("target_tol", 0.1))))
        slopes = [f.slope for _, f in fits]
        if slopes:
            out.metrics.update(slope_min=min(slopes), slope_max=max(slopes))
        out.timings["detachment"] = time.perf_counter() - t
    return out


def _run_membranes(cfg: ExperimentConfig, scale_f=1.0, scale_phi=1.0) -> Outcome:
    ue = _exterior(cfg.section("u_exterior"), cfg.dim)
    ve = _exterior(cfg.section("v_exterior"), cfg.dim)
    fsec = cfg.section("forcing")
    f = _graph(cfg, fsec, "f", scale=scale_f) if "f" in fsec else \
        GraphFunction.from_function("0", cfg.dim, cfg.radius, cfg.spacing)
    g = _graph(cfg, fsec, "g", scale=scale_f) if "g" in fsec else f.with_values(np.zeros_like(f.values))
    t = time.perf_counter()
    rep = solve_two_membranes(ue, ve, f, g, cfg.order, cfg.solver, tol_contact=cfg.tol_contact)
    out = Outcome(EXIT_OK if rep.converged else EXIT_FAILED, rep.message)
    out.timings["solve"] = time.perf_counter() - t
    U, V = rep.solution
    out.files["report.txt"] = _report(rep, {"exact_contact": rep.extra["exact_contact"],
                                            "tol_contact": rep.contact.tol_contact,
                                            "max_abs_u": float(np.max(np.abs(U.values))),
                                            "max_abs_v": float(np.max(np.abs(V.values)))})
    out.files["u.grid"] = _grid_text(U)
    out.files["v.grid"] = _grid_text(V)
    out.metrics.update(converged=int(rep.converged), iterations=rep.iterations,
                       energy=float(rep.energy_trace[-1]), contact_cells=len(rep.contact))
    an = cfg.section("analysis")
    h = cfg.spacing
    pts = rep.contact.boundary_indices
    if "separation" in cfg.analyses:
        win = _window(an, "separation_window", h)
        fits = [(pt, fit_detachment_exponent(U, V, pt, window=win)) for pt in pts]
        out.files.update(_fit_rows("separation", fits, 1.5 + cfg.order.s,
                                   _num(an.get("target_tol", 0.15))))
        slopes = [f.slope for _, f in fits]
        if slopes:
            out.metrics.update(slope_min=min(slopes), slope_max=max(slopes))
    if "regular_point" in cfg.analyses:
        thr = _num(an.get("regular_threshold", 0.1))
        rows = []
        for pt in pts:
            rp = regular_point_test(U, V, pt, cfg.order, threshold=thr)
            rows.append({"point": "-".join(map(str, pt)), "score": rp.score,
                         "normalized": rp.normalized, "threshold": thr, "regular": int(rp.regular)})
        out.files["regular_point.csv"] = csv_text(rows, ["point", "score", "normalized", "threshold",
                                                         "regular"])
        out.metrics["regular_points"] = sum(r["regular"] for r in rows)
    if "holder" in cfg.analyses:
        k = int(_num(an.get("holder_order", 2)))
        beta = _num(an.get("holder_beta", 0.5 - cfg.order.s))
        region = an.get("holder_region")
        reg = None
        if region is not None:
            lo, hi = _vec(region, h)
            reg = ((lo,) * cfg.dim, (hi,) * cfg.dim)
        val = holder_seminorm(V, k, beta, reg, seed=cfg.seed)
        out.files["holder.csv"] = csv_text([{"function": "v", "order": k, "beta": beta, "value": val}])
        out.metrics["holder"] = val
    if "el_residual" in cfg.analyses:
        r_int = _num(an.get("el_r_int", 0), h)
        tol = _num(an["el_tol"], h) if "el_tol" in an else None
        el = euler_lagrange_residual(U, V, rep.contact, cfg.order, f, g, r_int=r_int, tol=tol)
        out.files["el_residual.csv"] = csv_text(list(el.rows()), ["cell", "residual", "kappa", "curvature"])
        out.files["el_summary.csv"] = csv_text([{
            "max_residual": el.max_residual, "tol": el.tol, "kappa_ok": int(el.kappa_ok),
            "curvature_ok": int(el.curvature_ok), "combined_ok": int(el.combined_ok),
            "audited_cells": len(el.cells), "excluded_cells": len(el.excluded)}])
        out.metrics.update(el_max_residual=el.max_residual,
                           el_one_sided_ok=int(el.kappa_ok and el.curvature_ok and el.combined_ok))
    if "almost_minimality" in cfg.analyses:
        if cfg.dim != 1:
            raise InputError("the almost-minimality audit rasterizes 1D graphs")
        lo, hi = _vec(an.get("am_heights", "-0.5, 0.5"))
        E = subgraph(U, lo, hi)
        F = subgraph(V, lo, hi)
        trials = int(_num(an.get("am_trials", 50)))
        r_range = tuple(_vec(an["am_radii"], h)) if "am_radii" in an else None
        C_hat = unit_ball_interaction(2, cfg.order)
        au = almost_minimality_audit(F, E, cfg.order, trials=trials, seed=cfg.seed,
                                     r_range=r_range, C_hat=C_hat)
        out.files["almost_minimality.csv"] = csv_text(
            au["rows"], ["trial", "radius", "center", "lhs", "rhs", "ratio", "contains", "ok"])
        out.metrics.update(am_violations=au["violations"], am_max_ratio=au["max_ratio"],
                           am_C_hat=au["C_hat"])
    return out


def _set_inputs(cfg: ExperimentConfig):
    sec = cfg.section("set")
    n = int(_num(sec.get("dim", 2)))
    lo = _vec(sec.get("lo", ",".join(["-0.5"] * n)))
    hi = _vec(sec.get("hi", ",".join(["0.5"] * n)))
    rule = _rule(sec)
    frozen = sec.get("frozen")

    def init(x):
        if frozen is not None:
            from .domain import eval_expr
            return (eval_expr(frozen, x) > 0).astype(float)
        return rule(x)

    ext = IndicatorGrid.from_function(init, lo, hi, cfg.spacing, rule)
    from .domain import eval_expr
    O = ext.with_cells((eval_expr(sec.get("obstacle", "0"), ext.centers()) > 0).astype(float))
    window = None
    if "window_lo" in sec:
        window = (tuple(_vec(sec["window_lo"])), tuple(_vec(sec["window_hi"])))
    return ext, Obstacle(set=O), window


def _run_set(cfg: ExperimentConfig, scale_f=1.0, scale_phi=1.0) -> Outcome:
    ext, obst, window = _set_inputs(cfg)
    t = time.perf_counter()
    rep = solve_s_minimal_set(obst, ext, cfg.order, cfg.solver, window=window)
    out = Outcome(EXIT_OK if rep.converged else EXIT_FAILED, rep.message)
    out.timings["solve"] = time.perf_counter() - t
    out.files["report.txt"] = _report(rep, {"set_energy": rep.extra["energy"],
                                            "relaxation_gap": rep.extra["relaxation_gap"]})
    out.files["set.grid"] = _grid_text(rep.solution)
    out.metrics.update(converged=int(rep.converged), iterations=rep.iterations,
                       energy=float(rep.extra["energy"]))
    an = cfg.section("analysis")
    if "flatness" in cfg.analyses:
        x0, _ = face_point(rep.solution, np.asarray(_vec(an["flatness_point"])))
        win = _window(an, "flatness_window", cfg.spacing)
        fit = flatness_decay(rep.solution, x0, window=win)
        out.files.update(_fit_rows("flatness", [(("face",), fit)], 1 + cfg.order.sbar,
                                   _num(an.get("target_tol", 0.15))))
        out.metrics["flatness_slope"] = fit.slope
    return out


_RUNNERS = {"FractionalObstacle": _run_obstacle, "TwoMembranes": _run_membranes, "SMinimalSet": _run_set}


def execute(cfg: ExperimentConfig, scale_f=1.0, scale_phi=1.0) -> Outcome:
    return _RUNNERS[cfg.problem](cfg, scale_f, scale_phi)


# --------------------------------------------------------------------------
# writing


def _versions() -> dict:
    import scipy
    return {"nlobstacle": __version__, "python": platform.python_version(),
            "numpy": np.__version__, "scipy": scipy.__version__}


def _write(outdir: str, files: dict, manifest: dict) -> None:
    os.makedirs(outdir, exist_ok=True)
    listing = {}
    for name in sorted(files):
        data = files[name].encode()
        with open(os.path.join(outdir, name), "wb") as fh:
            fh.write(data)
        listing[name] = hashlib.sha256(data).hexdigest()
    manifest["files"] = listing
    manifest["files"]["manifest.json"] = None
    with open(os.path.join(outdir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _manifest(command: str, cfg: Optional[ExperimentConfig], status: int, message: str,
              timings: dict, errors: list) -> dict:
    return {"command": command, "config_sha256": None if cfg is None else cfg.digest(),
            "config_name": None if cfg is None else cfg.name,
            "versions": _versions(), "exit_status": status, "message": message,
            "wall_times": timings, "errors": errors,
            "started": time.strftime("%Y-%m-%dT%H:%M:%S%z")}


def _status_for(exc: BaseException) -> int:
    if isinstance(exc, OracleRefusal):
        return EXIT_REFUSAL
    if isinstance(exc, (NLObstacleError, ValueError, OSError)):
        return EXIT_INPUT
    return EXIT_FAILED


def cmd_run(args) -> int:
    cfg = None
    outdir = args.output_dir or "out"
    t0 = time.perf_counter()
    try:
        cfg = load_config(args.config, args.output_dir, args.seed)
        outdir = args.output_dir or cfg.output_dir
        out = execute(cfg)
    except Exception as exc:  # noqa: BLE001 - every failure lands in the manifest
        status = _status_for(exc)
        msg = f"{type(exc).__name__}: {exc}"
        print(msg, file=sys.stderr)
        _write(outdir, {}, _manifest("run", cfg, status, msg, {"total": time.perf_counter() - t0},
                                     [traceback.format_exc()]))
        return status
    out.timings["total"] = time.perf_counter() - t0
    _write(outdir, out.files, _manifest("run", cfg, out.status, out.message, out.timings, []))
    print(f"{cfg.problem}: {out.message} (exit {out.status})")
    return out.status


def _compare_rows(cfg: ExperimentConfig) -> list:
    if cfg.problem == "SMinimalSet":
        ext, obst, window = _set_inputs(cfg)
        orep, oset = exhaustive_set_min(obst, ext, cfg.order, window=window)
        rep = solve_s_minimal_set(obst, ext, cfg.order, cfg.solver, window=window)
        se = SetEnergy(ext, cfg.order, window)
        main_E = se.energy(rep.solution.cells)
        tol = 1e-6
        return [
            {"quantity": "energy", "main": main_E, "oracle": orep.value,
             "difference": main_E - orep.value, "tolerance": tol, "oracle_error": orep.estimated_error},
            {"quantity": "minimizer_mismatch_cells", "main": 0.0, "oracle": 0.0,
             "difference": float(np.sum(np.asarray(rep.solution.cells) != np.asarray(oset.cells))),
             "tolerance": 0.0, "oracle_error": 0.0},
        ]
    if cfg.problem == "FractionalObstacle":
        ext = _exterior(cfg.section("exterior"), cfg.dim)
        phi = _graph(cfg, cfg.section("obstacle"))
        fsec = cfg.section("forcing")
        f = _graph(cfg, fsec, "f") if "f" in fsec else None
        orep, ou = exhaustive_active_set(phi, ext, f, cfg.order)
        solver = SolverConfig(**{**cfg.solver.__dict__, "mode": "quadratic"})
        rep = solve_fractional_obstacle(Obstacle(graph=phi), ext, f, cfg.order, solver)
        u = rep.solution
        hd = cfg.spacing ** cfg.dim
        main_E = graph_quadratic_energy(u, cfg.order) + (0.0 if f is None else hd * float(np.sum(f.values * u.values)))
        return [
            {"quantity": "energy", "main": main_E, "oracle": orep.value,
             "difference": main_E - orep.value, "tolerance": 1e-8, "oracle_error": orep.estimated_error},
            {"quantity": "max_abs_u_difference", "main": 0.0, "oracle": 0.0,
             "difference": float(np.max(np.abs(u.values - ou.values))), "tolerance": 1e-6,
             "oracle_error": 0.0},
        ]
    raise InputError(f"no oracle for problem {cfg.problem}")


def cmd_oracle_compare(args) -> int:
    cfg = None
    outdir = args.output_dir or "out"
    t0 = time.perf_counter()
    try:
        cfg = load_config(args.config, args.output_dir, args.seed)
        outdir = args.output_dir or cfg.output_dir
        rows = _compare_rows(cfg)
    except Exception as exc:  # noqa: BLE001
        status = _status_for(exc)
        msg = f"{type(exc).__name__}: {exc}"
        print(msg, file=sys.stderr)
        _write(outdir, {}, _manifest("oracle-compare", cfg, status, msg,
                                     {"total": time.perf_counter() - t0}, [traceback.format_exc()]))
        return status
    for r in rows:
        if r["oracle_error"] >= r["tolerance"] > 0:
            r["status"] = "inconclusive"
        else:
            r["status"] = "pass" if abs(r["difference"]) <= r["tolerance"] else "fail"
    status = EXIT_FAILED if any(r["status"] == "fail" for r in rows) else EXIT_OK
    files = {"compare.csv": csv_text(rows, ["quantity", "main", "oracle", "difference", "tolerance",
                                            "oracle_error", "status"])}
    _write(outdir, files, _manifest("oracle-compare", cfg, status, "",
                                    {"total": time.perf_counter() - t0}, []))
    for r in rows:
        print(f"{r['quantity']}: {r['status']}")
    return status


def _sweep_one(payload):
    sections, source, base, param, value, seed = payload
    sections = copy.deepcopy(sections)
    scale_f = scale_phi = 1.0
    if param == "s":
        sections["experiment"]["s"] = str(value)
    elif param == "h":
        sections["experiment"]["spacing"] = str(value)
    elif param == "forcing":
        scale_f = value
    elif param == "obstacle":
        scale_phi = value
    try:
        cfg = config_from_sections(sections, source, base, seed=seed)
        out = execute(cfg, scale_f, scale_phi)
        return {"status": "ok" if out.status == EXIT_OK else "failed", "message": out.message,
                **out.metrics}
    except Exception as exc:  # noqa: BLE001 - a failed row does not stop the sweep
        return {"status": "failed", "message": f"{type(exc).__name__}: {exc}"}


_SWEEP_COLUMNS = ["converged", "iterations", "energy", "contact_cells", "slope_min", "slope_max",
                  "regular_points", "holder", "el_max_residual", "el_one_sided_ok",
                  "am_violations", "am_max_ratio", "flatness_slope"]


def cmd_sweep(args) -> int:
    t0 = time.perf_counter()
    cfg = None
    outdir = args.output_dir or "out"
    try:
        text, base, suffix = _locate(args.config)
        sections = _parse(text, suffix)
        cfg = config_from_sections(sections, text, base, args.output_dir, args.seed)
        outdir = args.output_dir or cfg.output_dir
        if args.param not in SWEEP_PARAMS:
            raise InputError(f"sweep parameter must be one of {SWEEP_PARAMS}")
        values = [v for v in (args.values or "").split(",") if v.strip()]
        if not values:
            raise InputError("empty value list")
        nums = [_num(v) for v in values]
    except Exception as exc:  # noqa: BLE001
        status = _status_for(exc)
        msg = f"{type(exc).__name__}: {exc}"
        print(msg, file=sys.stderr)
        _write(outdir, {}, _manifest("sweep", cfg, status, msg, {"total": time.perf_counter() - t0},
                                     [traceback.format_exc()]))
        return status
    payloads = [(sections, text, base, args.param, v, args.seed) for v in nums]
    workers = max(1, int(args.threads or 1))
    if workers > 1 and len(payloads) > 1:
        with ProcessPoolExecutor(max_workers=min(workers, len(payloads))) as ex:
            results = list(ex.map(_sweep_one, payloads))
    else:
        results = [_sweep_one(p) for p in payloads]
    rows = []
    for v, r in zip(nums, results):
        row = {"parameter": args.param, "value": v, "status": r["status"], "message": r["message"]}
        for c in _SWEEP_COLUMNS:
            row[c] = r.get(c, "")
        rows.append(row)
    failed = [r for r in results if r["status"] != "ok"]
    status = EXIT_FAILED if failed else EXIT_OK
    files = {"sweep.csv": csv_text(rows, ["parameter", "value", "status", "message"] + _SWEEP_COLUMNS)}
    _write(outdir, files, _manifest("sweep", cfg, status, "; ".join(r["message"] for r in failed),
                                    {"total": time.perf_counter() - t0}, []))
    print(f"sweep over {args.param}: {len(rows) - len(failed)} ok, {len(failed)} failed")
    return status


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="nlobstacle", description=__doc__)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--output-dir", default=None, help="directory for CSVs and the manifest")
    common.add_argument("--seed", type=int, default=None, help="override the config seed")
    common.add_argument("--threads", type=int, default=1,
                        help="worker processes for sweeps (numerical kernels stay single-threaded)")
    sub = ap.add_subparsers(dest="command", required=True)
    p = sub.add_parser("run", parents=[common], help="solve and analyse one experiment")
    p.add_argument("config", help="config file (.ini or .json) or preset name")
    p.set_defaults(func=cmd_run)
    p = sub.add_parser("oracle-compare", parents=[common], help="main solver against a brute-force oracle")
    p.add_argument("config")
    p.set_defaults(func=cmd_oracle_compare)
    p = sub.add_parser("sweep", parents=[common], help="run one experiment per parameter value")
    p.add_argument("config")
    p.add_argument("--param", required=True, help="one of s, h, forcing, obstacle")
    p.add_argument("--values", default="", help="comma-separated values")
    p.set_defaults(func=cmd_sweep)
    sub.add_parser("presets", help="list shipped presets").set_defaults(
        func=lambda a: print("\n".join(preset_names())) or 0)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    from threadpoolctl import threadpool_limits
    # single-threaded BLAS keeps every floating-point reduction in a fixed order
    with threadpool_limits(limits=1):
        return int(args.func(args))


if __name__ == "__main__":
    sys.exit(main())
