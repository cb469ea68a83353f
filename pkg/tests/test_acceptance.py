"""End-to-end acceptance checks.  Each test prints one PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v`` (or ``python3 tests/test_acceptance.py``).
"""
import csv
import os
import sys
import time

import numpy as np
import pytest

from nlobstacle import cli
from nlobstacle.analysis import unit_ball_interaction
from nlobstacle.domain import (ExteriorRule, ExteriorSpec, FractionalOrder, GraphFunction,
                               IndicatorGrid, Obstacle)
from nlobstacle.energy import SetEnergy, graph_area, graph_area_grad, graph_quadratic_energy
from nlobstacle.kernels import (GraphOperator, KernelSpec, fractional_curvature_set,
                                linearization_error_field, truncated_kernel_fE)
from nlobstacle.oracle import exhaustive_active_set, exhaustive_set_min, fd_gradient_check
from nlobstacle.solvers import SolverConfig, solve_fractional_obstacle, solve_s_minimal_set


def _report(capsys, number, ok, detail):
    with capsys.disabled():
        print(f"\nCRITERION {number}: {'PASS' if ok else 'FAIL'} {detail}")
    assert ok, detail


def _csv(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


_RUNS = {}


def _cli(tmp_root, key, argv):
    """Run the CLI once per key; returns (exit code, output dir, seconds)."""
    if key not in _RUNS:
        out = os.path.join(tmp_root, key)
        t = time.perf_counter()
        code = cli.main(argv + ["--output-dir", out])
        _RUNS[key] = (code, out, time.perf_counter() - t)
    return _RUNS[key]


@pytest.fixture(scope="module")
def root(tmp_path_factory):
    return str(tmp_path_factory.mktemp("acceptance"))


S_SWEEP = ["sweep", "thm11_s025", "--param", "s", "--values", "0.1,0.25,0.4"]
H_SWEEP = ["sweep", "membranes_s025", "--param", "h", "--values", "2^-7,2^-8"]


def test_criterion_1_detachment_exponent(root, capsys):
    code, out, secs = _cli(root, "s_sweep", S_SWEEP + ["--threads", "1"])
    rows = _csv(os.path.join(out, "sweep.csv"))
    parts, ok = [], code == 0 and len(rows) == 3
    for r in rows:
        target = 1.5 + float(r["value"])
        lo, hi = float(r["slope_min"]), float(r["slope_max"])
        good = r["status"] == "ok" and target - 0.1 <= lo and hi <= target + 0.1
        ok &= good
        parts.append(f"s={float(r['value']):g}: slopes [{lo:.3f}, {hi:.3f}] target {target:.2f}")
    ok &= secs < 3 * 120
    _report(capsys, 1, ok, "; ".join(parts) + f"; {secs:.0f}s for three values")


def _membranes(root):
    fine = _cli(root, "membranes", ["run", "membranes_s025", "--threads", "1"])
    coarse = _cli(root, "h_sweep", H_SWEEP + ["--threads", "1"])
    return fine, coarse


def test_criterion_2_membranes_regularity(root, capsys):
    (code, out, secs), (code2, out2, secs2) = _membranes(root)
    fits = _csv(os.path.join(out, "separation_fit.csv"))
    regular = {r["point"] for r in _csv(os.path.join(out, "regular_point.csv")) if r["regular"] == "1"}
    at_regular = [float(r["slope"]) for r in fits if r["point"] in regular]
    sweep = _csv(os.path.join(out2, "sweep.csv"))
    h_fine = float(_csv(os.path.join(out, "holder.csv"))[0]["value"])
    h_mid = float(sweep[1]["holder"])
    ratio = max(h_fine / h_mid, h_mid / h_fine)
    ok = (code == 0 and code2 == 0 and at_regular
          and all(abs(s - 1.75) <= 0.15 for s in at_regular) and ratio <= 2
          and secs + secs2 < 300)
    _report(capsys, 2, ok, f"slopes at {len(at_regular)} regular points {at_regular}; "
            f"Holder seminorm 2^-8 {h_mid:.4f}, 2^-9 {h_fine:.4f}, ratio {ratio:.3f}; "
            f"{secs + secs2:.0f}s")


def test_criterion_3_euler_lagrange(root, capsys):
    (code, out, _), (code2, out2, _) = _membranes(root)
    sweep = _csv(os.path.join(out2, "sweep.csv"))
    summ = _csv(os.path.join(out, "el_summary.csv"))[0]
    res = [float(sweep[0]["el_max_residual"]), float(sweep[1]["el_max_residual"]),
           float(summ["max_residual"])]
    one_sided = (all(r["el_one_sided_ok"] == "1" for r in sweep)
                 and summ["kappa_ok"] == summ["curvature_ok"] == summ["combined_ok"] == "1")
    decrease = [res[i] / res[i + 1] for i in range(2)]
    ok = code == 0 and code2 == 0 and min(decrease) >= 2 and one_sided
    _report(capsys, 3, ok, f"max residual at h=2^-7,2^-8,2^-9: {res}; decrease factors "
            f"{[round(d, 2) for d in decrease]}; one-sided checks {'hold' if one_sided else 'violated'} "
            f"(tol at 2^-9 = {float(summ['tol']):.4g})")


def _set_instance(seed):
    rule = ExteriorRule.halfspace((0, 1), 0.0)
    ext = IndicatorGrid.from_function(rule, (-0.5, -0.5), (0.5, 0.5), 1 / 8, rule)
    window = ((-0.25, -0.25), (0.25, 0.25))
    C = ext.centers()
    inside = np.all((C > window[0]) & (C < window[1]), axis=-1)
    rng = np.random.default_rng(seed)
    O = ext.with_cells(((rng.random(ext.shape) < 0.25) & inside).astype(float))
    return ext, Obstacle(set=O), window


def _obstacle_instance(t):
    rng = np.random.default_rng(200 + t)
    order = FractionalOrder(float(rng.uniform(0.1, 0.4)))
    if t < 5:
        dim, h = 1, 1 / 8
    else:
        dim, h = 2, 1 / 2
    c = rng.uniform(-0.5, 0.5, dim) * 0.5
    a = rng.uniform(0.2, 1.0)
    noise = 0.05 * rng.standard_normal(16)
    phi = GraphFunction.from_function(
        lambda x: a * (0.5 - np.sum((x - c) ** 2, axis=-1)), dim, 1.0, h)
    phi = phi.with_values(phi.values + noise.reshape(phi.values.shape))
    f = phi.with_values(np.full(phi.values.shape, rng.uniform(-1, 1)))
    return phi, f, order


# random obstacles may rise above the zero exterior at edge cells; the solver warns and both
# methods still solve the same constrained problem
@pytest.mark.filterwarnings("ignore:obstacle exceeds the exterior data:UserWarning")
def test_criterion_4_oracle_equivalence(capsys):
    t0 = time.perf_counter()
    order = FractionalOrder(0.25)
    set_gaps, obst_gaps = [], []
    for seed in range(100, 110):
        ext, obst, window = _set_instance(seed)
        orep, _ = exhaustive_set_min(obst, ext, order, window=window)
        rep = solve_s_minimal_set(obst, ext, order, window=window)
        main = SetEnergy(ext, order, window).energy(rep.solution.cells)
        set_gaps.append(main - orep.value)
    for t in range(10):
        phi, f, o = _obstacle_instance(t)
        orep, _ = exhaustive_active_set(phi, ExteriorSpec.zero(), f, o)
        rep = solve_fractional_obstacle(Obstacle(graph=phi), ExteriorSpec.zero(), f, o,
                                        SolverConfig(mode="quadratic"))
        u = rep.solution
        main = graph_quadratic_energy(u, o) + u.spacing ** u.dim * float(np.sum(f.values * u.values))
        obst_gaps.append(main - orep.value)
    secs = time.perf_counter() - t0
    ok = (max(abs(g) for g in set_gaps) <= 1e-6 and max(abs(g) for g in obst_gaps) <= 1e-8
          and secs < 120)
    _report(capsys, 4, ok, f"set energy gaps max {max(map(abs, set_gaps)):.2e} (10 instances); "
            f"obstacle energy gaps max {max(map(abs, obst_gaps)):.2e} (10 instances); {secs:.0f}s")


def test_criterion_5_kernel_suite(capsys):
    order = FractionalOrder(0.25)
    h = 1 / 32
    spec = KernelSpec(order, h)
    # half-spaces bounded by grid lines, probed along the face
    half = []
    fE = []
    for normal, off in [((0, 1), 0.0), ((1, 0), 0.0), ((0, -1), 0.25), ((-1, 0), -0.125)]:
        rule = ExteriorRule.halfspace(normal, off)
        E = IndicatorGrid.from_function(rule, (-1, -1), (1, 1), h, rule)
        e = np.asarray(rule.normal)
        tangent = np.array([-e[1], e[0]])
        for t in (-0.5, -0.2, 0.0, 0.3, 0.6):
            y = e * rule.offset + t * tangent
            half.append(abs(fractional_curvature_set(E, spec, y)))
            fE.append(abs(truncated_kernel_fE(E, spec, y)))
    # antisymmetry on a ball and on a random sharp set
    B = IndicatorGrid.from_function(lambda x: (np.sum(x ** 2, -1) < 0.25).astype(float),
                                    (-1, -1), (1, 1), h, ExteriorRule("empty"))
    anti = [abs(fractional_curvature_set(B, spec, x) + fractional_curvature_set(B.complement(), spec, x))
            for x in (np.array([0.5, 0.0]), np.array([0.0, -0.5]), np.array([0.35, 0.35]))]
    # scaling: K(lam E)(lam x) = lam^{-2s} K(E)(x)
    K = []
    for lam in (1, 2, 4):
        Bl = IndicatorGrid.from_function(lambda x: (np.sum(x ** 2, -1) < (0.25 * lam) ** 2).astype(float),
                                         (-lam, -lam), (lam, lam), h * lam, ExteriorRule("empty"))
        K.append(fractional_curvature_set(Bl, KernelSpec(order, h * lam), np.array([0.25 * lam, 0.0])))
    slopes = [np.log(K[1] / K[0]) / np.log(2), np.log(K[2] / K[0]) / np.log(4)]
    # first variations
    rng = np.random.default_rng(5)
    steps = (4e-5, 2e-5, 1e-5, 5e-6)
    u = GraphFunction.from_function("0.2*maximum(0,1-2*x**2)**2", 1, 1.0, h, ExteriorSpec.plane((0.1,), 0.05))
    op = GraphOperator(u, spec)
    v = u.values.reshape(-1)
    d = rng.standard_normal(v.size)
    d /= np.linalg.norm(d)

    def area(w):
        return graph_area(u.with_values(w.reshape(u.values.shape)))

    def area_grad(w):
        return graph_area_grad(u.with_values(w.reshape(u.values.shape)))

    rule = ExteriorRule.halfspace((0, 1), 0.0)
    E = IndicatorGrid.from_function(rule, (-0.5, -0.5), (0.5, 0.5), 1 / 16, rule)
    se = SetEnergy(E, order, ((-0.25, -0.25), (0.25, 0.25)))
    th = np.clip(np.asarray(E.cells) + 0.3 * rng.random(E.shape), 0, 1)
    dth = np.where(se.omega, rng.standard_normal(E.shape), 0.0)
    fd = {
        "J_s": fd_gradient_check(op.Js, op.Js_grad, v, d, steps=steps).value,
        "P_h": fd_gradient_check(op.pgraph, lambda w: -h * op.curvature_h(w), v, d, steps=steps).value,
        "area": fd_gradient_check(area, area_grad, v, d, steps=steps).value,
        "set": fd_gradient_check(se.energy, se.gradient, th, dth / np.linalg.norm(dth), steps=steps).value,
    }
    ok = (max(half) <= 1e-3 and max(anti) <= 1e-12 and all(abs(s + 0.5) <= 2e-2 for s in slopes)
          and max(fE) <= 1e-3 and max(fd.values()) <= 1e-6)
    _report(capsys, 5, ok, f"half-space |K| max {max(half):.1e} over {len(half)} points; antisymmetry "
            f"{max(anti):.1e}; scaling exponents {[round(float(s), 4) for s in slopes]} (target -0.5); "
            f"|f_E| max {max(fE):.1e}; gradient mismatch "
            + ", ".join(f"{k} {v:.1e}" for k, v in fd.items()))


def _modulus_constant(h, pairs=2000, seed=0, beta=0.7):
    order = FractionalOrder(0.25)
    u = GraphFunction.from_function(lambda x: 0.5 * np.abs(x[..., 0]) ** 1.7 * (1 - x[..., 0] ** 2) ** 2,
                                    1, 1.0, h)
    g = linearization_error_field(u, KernelSpec(order, h))
    x = u.axis
    sel = np.flatnonzero(np.abs(x) <= 0.5)
    rng = np.random.default_rng(seed)
    i, j = rng.choice(sel, pairs), rng.choice(sel, pairs)
    keep = i != j
    i, j = i[keep], j[keep]
    dist = np.abs(x[i] - x[j])
    M = np.maximum(np.abs(x[i]), np.abs(x[j]))
    bound = M ** (2 * beta) * dist ** (beta - 2 * order.s) + dist
    return float(np.max(np.abs(g[i] - g[j]) / bound)), int(keep.sum())


def test_criterion_6_linearization_modulus(capsys):
    c1, n1 = _modulus_constant(2 ** -8)
    c2, n2 = _modulus_constant(2 ** -9)
    rel = abs(c2 / c1 - 1)
    ok = min(n1, n2) >= 1000 and rel <= 0.2
    _report(capsys, 6, ok, f"C_hat {c1:.4f} at h=2^-8 ({n1} pairs), {c2:.4f} at h=2^-9 ({n2} pairs); "
            f"relative change {rel:.3f}")


def test_criterion_7_almost_minimality(root, capsys):
    code, out, secs = _cli(root, "audit", ["run", "membranes_audit", "--threads", "1"])
    rows = _csv(os.path.join(out, "almost_minimality.csv"))
    C_hat = unit_ball_interaction(2, FractionalOrder(0.25))
    consistent = all(abs(float(r["rhs"]) - C_hat * float(r["radius"]) ** 1.5) <= 1e-9 * float(r["rhs"])
                     for r in rows)
    violations = sum(r["ok"] != "1" for r in rows)
    ok = code == 0 and len(rows) == 50 and violations == 0 and consistent
    _report(capsys, 7, ok, f"{len(rows)} trials, {violations} violations, max ratio "
            f"{max(float(r['ratio']) for r in rows):.3g}, C_hat = L(B_1, CB_1) = {C_hat:.4f}")


PRESET_RUNS = {
    "s_sweep": S_SWEEP,
    "h_sweep": H_SWEEP,
    "membranes": ["run", "membranes_s025"],
    "audit": ["run", "membranes_audit"],
    "flat": ["run", "flat_membranes"],
    "set": ["run", "oracle_set_4x4"],
    "obstacle": ["run", "oracle_obstacle_8"],
    "cmp_set": ["oracle-compare", "oracle_set_4x4"],
    "cmp_obstacle": ["oracle-compare", "oracle_obstacle_8"],
}


def test_criterion_8_determinism(root, capsys):
    diffs, compared = [], 0
    for key, argv in PRESET_RUNS.items():
        code1, out1, _ = _cli(root, key, argv + ["--threads", "1"])
        code2, out2, _ = _cli(root, key + "_t2", argv + ["--threads", "2"])
        names = sorted(n for n in os.listdir(out1) if n.endswith(".csv"))
        if code1 != code2 or names != sorted(n for n in os.listdir(out2) if n.endswith(".csv")):
            diffs.append(key)
            continue
        for n in names:
            with open(os.path.join(out1, n), "rb") as a, open(os.path.join(out2, n), "rb") as b:
                compared += 1
                if a.read() != b.read():
                    diffs.append(f"{key}/{n}")
    ok = not diffs and compared > 0
    _report(capsys, 8, ok, f"{compared} CSV files compared across --threads 1 and 2; "
            f"differences: {diffs or 'none'}")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v"]))
