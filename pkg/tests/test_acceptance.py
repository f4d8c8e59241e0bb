"""End-to-end acceptance runs at the stated budgets and tolerances.

Each test prints one PASS/FAIL line. Run with ``pytest -v tests/test_acceptance.py``.
"""

import json
import os

import numpy as np
import pytest

from ricci_paths import cli
from ricci_paths import estimates as es
from ricci_paths import feynman_kac as fk
from ricci_paths import framebundle as fb
from ricci_paths import functions as fn
from ricci_paths import pathspace as ps
from ricci_paths import pde_oracle as po
from ricci_paths.geometry import FlatTorus, ScaledTorus, ShrinkingSphere

pytestmark = pytest.mark.acceptance


@pytest.fixture
def report(capsys):
    def _report(n, ok, detail):
        with capsys.disabled():
            print(f"\n[criterion {n:2d}] {'PASS' if ok else 'FAIL'}  {detail}")
        assert ok, detail
    return _report


def test_01_wiener_marginals(report):
    x, s, dtau = 0.7, 0.25, 1e-3
    est = ps.expectation(fn.one_point(fn.TorusMode([1.0]), s), FlatTorus(1), [x], 0.5, 20000,
                         dtau, 0)
    diff = abs(est.mean - np.exp(-s) * np.cos(x))
    tol = 3 * est.stderr + 0.5 * dtau
    report(1, diff <= tol, f"|E cos X - e^-s cos x| = {diff:.2e} <= {tol:.2e}")


def test_02_frame_invariants(report):
    levels = (1e-2, 1e-3, 1e-4)
    C = []
    for dt in levels:
        rec = fb.sample_paths(ShrinkingSphere(1.0), [0.3, 0.2], 0.2, dt, 0, range(64))
        C.append(rec.drift.max() / dt)
    C = np.array(C)
    ratios = C[:-1] / C[1:]
    linear = bool(np.all((ratios >= 0.5) & (ratios <= 2.0)))
    rec = fb.sample_paths(ShrinkingSphere(1.0), [1.4, 0.3], 0.2, 1e-3, 7, range(32))
    rep = fb.replay(rec)
    exact = all(np.array_equal(a, b) for a, b in ((rec.x, rep.x), (rec.e, rep.e),
                                                  (rec.chart, rep.chart), (rec.drift, rep.drift)))
    report(2, linear and exact,
           f"max drift / dtau = {np.round(C, 3).tolist()}, ratios {np.round(ratios, 3).tolist()}, "
           f"replay bit-exact = {exact}")


def test_03_gradient_formula_sphere(report):
    fam, x, T, dtau, N = ShrinkingSphere(1.0), np.array([0.3, 0.2]), 0.3, 1e-3, 50000
    F = fn.ProductCylinder([0.05, 0.1], [fn.AmbientLinear([1.0, 0.2, 0.0], 1.5),
                                         fn.AmbientLinear([0.0, 0.5, 1.0], 2.0)])
    _, par, fd, _ = ps.gradient_samples(F, fam, x, T, N, dtau, 0)
    gap = np.abs(fd.mean(0) - par.mean(0))
    tol = 3 * np.sqrt(fd.var(0, ddof=1) / N + par.var(0, ddof=1) / N) + 2 * dtau
    _, corr, _ = fk.gradient_formula(F, fam, x, T, 2048, dtau, 0)
    corr_zero = bool(np.all(np.abs(corr.mean) <= 3 * np.asarray(corr.stderr) + 1e-12))
    report(3, bool(np.all(gap <= tol)) and corr_zero,
           f"|grad E F - E par grad| = {np.round(gap, 5).tolist()} <= {np.round(tol, 5).tolist()}; "
           f"correction = {np.asarray(corr.mean).tolist()}")


def test_04_ricci_detection(report):
    lines, ok = [], True
    T = 0.25
    for lam in (0.1, 0.2, 0.4):
        fam = ScaledTorus(2, lam)
        v = np.array([1.0, 0.0]) / np.sqrt(1 + lam * T)
        r = fk.ricci_defect_probe(fam, [0.0, 0.0], T, v, N=20000, dtau=1e-3)
        good = abs(r.probe_value - lam / 2) <= max(0.2 * lam / 2, 3 * r.stderr)
        ok &= good
        lines.append(f"lambda={lam}: {r.probe_value:.4f}")
    rg = np.random.default_rng(1)
    for fam, x in ((ShrinkingSphere(1.0), [0.3, 0.2]), (FlatTorus(2), [1.0, 2.0])):
        v = fk.random_unit_vector(fam, x, 0.3, rg)
        r = fk.ricci_defect_probe(fam, x, 0.3, v, N=20000, dtau=1e-3)
        ok &= abs(r.probe_value) <= 0.02
        lines.append(f"{type(fam).__name__}: {r.probe_value:.4f} +- {r.stderr:.4f}")
    report(4, ok, "; ".join(lines))


TORUS_FUNCS = [fn.ConstantScalar(1.0), fn.TorusMode([1, 0]), fn.TorusMode([1, 1], 0.3, 1.0, 2.0),
               fn.TorusMode([2, -1], 1.1, 0.5, 1.0)]
TORUS_PTS = [[0.0, 0.0], [0.7, 1.3], [2.0, 4.0], [3.1, 0.4], [5.5, 2.2]]


def test_05_supersolution_suite(report):
    rows = po.supersolution_checks(ScaledTorus(2, 0.2), TORUS_PTS, TORUS_FUNCS, 0.5, 0.2)
    worst = min(r.margin for r in rows)
    holds = len(rows) == 5 * 4 * 4 and worst >= -1e-6
    fam = ScaledTorus(2, -0.2)
    s3 = []
    for x in TORUS_PTS:
        # sin(y1 - x1): the periodic stand-in for the chart-linear probe through x
        u = fn.TorusMode([1, 0], -x[0] - np.pi / 2)
        s3 += [r.margin for r in po.supersolution_rows(fam, x, 0.5, 0.49, u) if r.check == "S3"]
    violated = max(s3) < -1e-6
    report(5, holds and violated,
           f"ScaledTorus(0.2): {len(rows)} rows, min margin {worst:.2e}; "
           f"ScaledTorus(-0.2) S3 margins {np.round(s3, 5).tolist()}")


def test_06_sharp_constants(report):
    fam, T, s = FlatTorus(1), 0.31, 0.3
    s5_funcs = [fn.TorusMode([1.0]), fn.TorusMode([2.0], 0.4), fn.TorusMode([1.0], -np.pi / 2, 0.1, 1.0)]
    s4_funcs = [fn.TorusMode([1.0], -np.pi / 2, 0.1, 1.0), fn.TorusMode([2.0], 0.4, 0.1, 1.0)]
    s4, s5 = [], []
    for x in (0.3, 1.0, 2.5):
        s5 += [r.ratio for f in s5_funcs for r in po.supersolution_rows(fam, [x], T, s, f)
               if r.check == "S5"]
        s4 += [r.ratio for f in s4_funcs for r in po.supersolution_rows(fam, [x], T, s, f)
               if r.check == "S4"]
    ok = min(s5) >= 0.9 and max(s5) <= 1.0 and min(s4) >= 0.85 and max(s4) <= 1.0
    report(6, ok, f"S5 ratios in [{min(s5):.4f}, {max(s5):.4f}], "
                  f"S4 ratios in [{min(s4):.4f}, {max(s4):.4f}]")


def test_07_quadratic_variation_rate(report):
    x, s = 1.0, 0.1
    F = fn.one_point(fn.TorusMode([1.0]), s)
    r = es.check_R3(FlatTorus(1), [x], 0.5, F, 0.0,
                    {"N": 2000, "N_inner": 500, "dtau": 1e-3, "seed": 0})
    ref = 2 * np.exp(-2 * s) * np.sin(x) ** 2
    gap = abs(r.lhs.mean - ref)
    tol = 0.15 * ref + 3 * r.lhs.stderr
    report(7, gap <= tol, f"rate {r.lhs.mean:.4f} +- {r.lhs.stderr:.4f} vs 2|grad P u|^2 = {ref:.4f}")


def test_08_integration_by_parts(report):
    dtau = 1e-3
    x, s = 0.8, 0.3
    F = fn.one_point(fn.TorusMode([1.0]), s)
    V = fn.PolynomialVariation([1.0], [0, 1])
    flat = es.check_ibp(FlatTorus(1), [x], 0.5, F, fn.ConstantCylinder(1.0), V,
                        {"N": 20000, "dtau": dtau, "seed": 0})
    exact = -s * np.exp(-s) * np.sin(x)
    ok_flat = all(abs(m - exact) <= 3 * se + 0.5 * dtau for m, se in
                  ((flat.lhs.mean, flat.lhs.stderr), (flat.rhs.mean, flat.rhs.stderr)))
    ok_flat &= abs(flat.margin) <= 3 * flat.stderr + 0.5 * dtau
    fam = ShrinkingSphere(1.0)
    Fs = fn.one_point(fn.AmbientLinear([1.0, 0.0, 0.5]), 0.2)
    Gs = fn.one_point(fn.AmbientLinear([0.0, 1.0, 0.0], 2.0), 0.1)
    Vs = fn.PolynomialVariation([0.5, 0.5], [0, 1, -1])
    sph = es.check_ibp(fam, [0.3, 0.1], 0.3, Fs, Gs, Vs, {"N": 100000, "dtau": dtau, "seed": 0})
    ok_sph = abs(sph.margin) <= 3 * sph.stderr + 2 * dtau
    report(8, ok_flat and ok_sph,
           f"flat: {flat.lhs.mean:.5f} / {flat.rhs.mean:.5f} vs {exact:.5f}; "
           f"sphere: {sph.lhs.mean:.5f} / {sph.rhs.mean:.5f} (tol {3 * sph.stderr + 2 * dtau:.5f})")


def test_09_reduction_consistency(report):
    fam, x, T, s, dtau = ScaledTorus(1, 0.2), [0.9], 0.2, 0.1, 1e-3
    u = fn.TorusMode([1.0], 0.3, 1.0, 2.0)
    F = fn.one_point(u, T - s)
    rows = {r.check: r for r in po.supersolution_rows(fam, x, T, s, u)}
    nu = po.heat_measure(fam, x, T, s)
    m2 = nu.integrate(u.value(fam, nu.chart, nu.pts) ** 2)
    b = {"dtau": dtau, "seed": 0}
    pairs = [
        ("R2/S2", es.check_R2(fam, x, T, F, dict(b, N=20000)), rows["S2"].lhs, rows["S2"].rhs),
        ("R3/S3", es.check_R3(fam, x, T, F, 0.0, dict(b, N=2000, N_inner=200)),
         2 * rows["S3"].lhs, 2 * rows["S3"].rhs),
        ("R4/S4", es.check_R4(fam, x, T, F, 0.0, T - s, dict(b, N=10000, N_inner=100)),
         m2 * rows["S4"].lhs, m2 * rows["S4"].rhs),
        ("R5/S5", es.check_R5(fam, x, T, F, 0.0, T - s, dict(b, N=4000, N_inner=200)),
         rows["S5"].lhs, rows["S5"].rhs),
    ]
    ok, lines = True, []
    for name, r, lo, ro in pairs:
        tl = 3 * r.lhs.stderr + r.bias
        tr = 3 * r.rhs.stderr + r.bias
        good = abs(r.lhs.mean - lo) <= tl and abs(r.rhs.mean - ro) <= tr
        ok &= good
        lines.append(f"{name} lhs {r.lhs.mean:.4f}~{lo:.4f} rhs {r.rhs.mean:.4f}~{ro:.4f}")
    report(9, ok, "; ".join(lines))


CONFIGS = {
    "check-gap": {"family": {"family": "shrinking_sphere", "c0": 1.0}, "points": [[0.3, 0.2]],
                  "T": 0.3, "F": {"type": "product", "times": [0.1],
                                  "factors": [{"type": "ambient_linear", "a": [1, 0, 0]}]},
                  "windows": {"tau1": 0.0, "tau2": 0.1},
                  "budgets": {"N": 3000, "N_inner": 20, "dtau": 0.005}},
    "check-gradient": {"family": {"family": "shrinking_sphere", "c0": 1.0},
                       "points": [[0.3, 0.2]], "T": 0.3, "probe": {"sigma": 0.05},
                       "budgets": {"N": 3000, "dtau": 0.005}},
    "detect-ricci": {"family": {"family": "shrinking_sphere", "c0": 1.0}, "points": [[0.3, 0.2]],
                     "T": 0.3, "budgets": {"N": 3000, "dtau": 0.005}},
    "check-supersolution": {"family": {"family": "scaled_torus", "n": 2, "lambda": -0.2},
                            "points": [[0.0, 0.0]], "T": 0.5, "s": 0.49,
                            "functions": [{"type": "trig", "k": [1, 0], "phase": -1.5707963}]},
}


def _payloads(out):
    return {p: (out / p).read_bytes() for p in sorted(os.listdir(out))
            if not p.endswith(".timing.json") and not p.startswith(".")}


def test_10_determinism(report, tmp_path):
    ok, lines = True, []
    for cmd, cfg in CONFIGS.items():
        path = tmp_path / f"{cmd}.json"
        path.write_text(json.dumps(cfg))
        got = []
        for jobs in (1, 4, 8):
            out = tmp_path / f"{cmd}-{jobs}"
            code = cli.main([cmd, "--config", str(path), "--out", str(out), "--jobs", str(jobs)])
            got.append((code, _payloads(out)))
        same = all(g == got[0] for g in got[1:])
        ok &= same
        lines.append(f"{cmd}: exit {got[0][0]}, identical={same}")
    report(10, ok, "; ".join(lines))
