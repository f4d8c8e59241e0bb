"""Command-line experiment runner.

    ricci-paths <subcommand> --config run.json [--out DIR] [--seed S] [--jobs J]

A run is fully described by its JSON config. Every check writes one JSON
report per (check, point) into the output directory and one CSV table per
subcommand. Exit codes: 0 all checks hold (or the family is a Ricci flow),
2 a violation was found, 3 inconclusive, 1 error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import tempfile
import time

import numpy as np

from . import estimates as est
from . import framebundle as fb
from .feynman_kac import fk_solve_vector, random_unit_vector, ricci_defect_probe
from .functions import (
    ConstantField,
    CoordinateField,
    GradientField,
    ScalarPotential,
    make_cylinder,
    make_scalar,
    make_variation,
    probe_function,
)
from .geometry import FAMILIES, classify_eigenvalues, make_family, ricci_flow_defect
from .pde_oracle import supersolution_rows

EXIT_OK, EXIT_ERROR, EXIT_VIOLATION, EXIT_INCONCLUSIVE = 0, 1, 2, 3
CSV_COLUMNS = ["check", "family", "point", "lhs", "lhs_stderr", "rhs", "rhs_stderr", "margin",
               "stderr", "verdict"]
OUT_ENV = "RICCI_PATHS_OUT"
S_TOL = 1e-6


class ConfigError(ValueError):
    pass


# config validation ------------------------------------------------------------------


def _require(cfg, key, kind, path=""):
    where = f"{path}.{key}" if path else key
    if key not in cfg:
        raise ConfigError(f"missing field '{where}'")
    val = cfg[key]
    if kind == "number" and not isinstance(val, (int, float)):
        raise ConfigError(f"field '{where}' must be a number")
    if kind == "list" and not isinstance(val, list):
        raise ConfigError(f"field '{where}' must be a list")
    if kind == "object" and not isinstance(val, dict):
        raise ConfigError(f"field '{where}' must be an object")
    return val


def _build(factory, spec, where):
    try:
        return factory(spec)
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"field '{where}': cannot build from {spec!r} ({exc!r})") from exc


NEEDS_F = {"check-gradient", "check-martingale", "check-logsob", "check-gap", "check-ibp"}


def validate(cmd, cfg):
    """Raise ConfigError naming the offending field path."""
    if not isinstance(cfg, dict):
        raise ConfigError("config must be a JSON object")
    fam = _require(cfg, "family", "object")
    name = _require(fam, "family", None, "family")
    if name not in FAMILIES:
        raise ConfigError(f"field 'family.family': unknown family '{name}'")
    try:
        make_family(fam)
    except (KeyError, ValueError, TypeError) as exc:
        raise ConfigError(f"field 'family': {exc}") from exc
    pts = _require(cfg, "points", "list")
    if not pts:
        raise ConfigError("field 'points' must be a non-empty list of base points")
    n = make_family(fam).n
    for i, p in enumerate(pts):
        if not isinstance(p, list) or len(p) != n:
            raise ConfigError(f"field 'points[{i}]' must be a list of {n} numbers")
    T = _require(cfg, "T", "number")
    if T <= 0:
        raise ConfigError("field 'T' must be positive")
    b = cfg.get("budgets", {})
    if not isinstance(b, dict):
        raise ConfigError("field 'budgets' must be an object")
    for key in ("N", "N_inner", "panel", "M"):
        if key in b and (not isinstance(b[key], int) or b[key] < 2):
            raise ConfigError(f"field 'budgets.{key}' must be an integer >= 2")
    if "dtau" in b and (not isinstance(b["dtau"], (int, float)) or b["dtau"] <= 0):
        raise ConfigError("field 'budgets.dtau' must be positive")
    if cmd == "check-supersolution":
        fs = _require(cfg, "functions", "list")
        if not fs:
            raise ConfigError("field 'functions' must be non-empty")
        _require(cfg, "s", "number")
        for i, f in enumerate(fs):
            _build(make_scalar, f, f"functions[{i}]")
    if "F" in cfg:
        _build(make_cylinder, cfg["F"], "F")
    if cmd in NEEDS_F and "F" not in cfg and "probe" not in cfg:
        raise ConfigError("missing field 'F' (or 'probe')")
    if cmd == "check-ibp":
        _build(make_cylinder, _require(cfg, "G", "object"), "G")
        _build(make_variation, _require(cfg, "variation", "object"), "variation")
    if cmd == "fk-solve":
        _require(cfg, "Z", "object")
        _require(cfg, "s", "number")


# helpers ---------------------------------------------------------------------------


def _write_atomic(path, text):
    d = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-")
    with os.fdopen(fd, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _dumps(obj):
    return json.dumps(obj, sort_keys=True, indent=2, default=est._jsonable) + "\n"


def _csv_row(rep):
    d = rep.to_dict() if hasattr(rep, "to_dict") else rep
    lhs, rhs = d["lhs"], d["rhs"]
    return {"check": d["check"], "family": json.dumps(d["family"], sort_keys=True),
            "point": json.dumps(d["params"].get("x")),
            "lhs": lhs["mean"], "lhs_stderr": lhs["stderr"], "rhs": rhs["mean"],
            "rhs_stderr": rhs["stderr"], "margin": d["margin"], "stderr": d["stderr"],
            "verdict": d["verdict"]}


def _emit(out, cmd, reports):
    os.makedirs(out, exist_ok=True)
    rows = []
    for i, rep in enumerate(reports):
        d = rep.to_dict() if hasattr(rep, "to_dict") else rep
        tag = d["check"].replace("'", "prime")
        _write_atomic(os.path.join(out, f"{cmd}-{i:03d}-{tag}.json"), _dumps(d))
        rows.append(_csv_row(d))
    buf = [",".join(CSV_COLUMNS)]
    for r in rows:
        vals = []
        for c in CSV_COLUMNS:
            v = r[c]
            vals.append(repr(float(v)) if isinstance(v, (float, np.floating)) else str(v))
        buf.append(",".join('"' + s.replace('"', '""') + '"' if "," in s or '"' in s else s
                            for s in vals))
    _write_atomic(os.path.join(out, f"{cmd}.csv"), "\n".join(buf) + "\n")


def _exit_code(verdicts):
    if any(v == est.VIOLATED for v in verdicts):
        return EXIT_VIOLATION
    if any(v == est.INCONCLUSIVE for v in verdicts):
        return EXIT_INCONCLUSIVE
    return EXIT_OK


def _budgets(cfg):
    b = dict(cfg.get("budgets", {}))
    b["seed"] = int(cfg.get("seed", 0))
    b["jobs"] = int(cfg.get("jobs", 1))
    return b


def _F(cfg, fam, x, T):
    if "F" in cfg:
        return make_cylinder(cfg["F"])
    pr = cfg["probe"]
    v = np.asarray(pr.get("v", [1.0] + [0.0] * (fam.n - 1)), float)
    v = v / np.sqrt(v @ fam.metric(np.asarray(x, float), T) @ v)
    return probe_function(fam, x, T, v, pr.get("sigma", 0.05), tuple(pr.get("weights", (2.0, -1.0))))


def _charts(cfg):
    return cfg.get("charts", [0] * len(cfg["points"]))


# subcommands ------------------------------------------------------------------------


def cmd_simulate_paths(cfg, out):
    fam = make_family(cfg["family"])
    b = _budgets(cfg)
    N, dtau = int(b.get("N", 16)), float(b.get("dtau", 1e-3))
    summary = []
    for i, (x, c) in enumerate(zip(cfg["points"], _charts(cfg))):
        rec = fb.sample_paths(fam, x, cfg["T"], dtau, b["seed"], range(N), chart=c)
        os.makedirs(out, exist_ok=True)
        with open(os.path.join(out, f"paths-{i:03d}.bin"), "wb") as fh:
            fb.dump_paths(rec, fh)
        w = fb.antidevelopment(rec)[:, -1]
        summary.append({"check": "simulate", "point": list(map(float, x)), "n": N, "dtau": dtau,
                        "mean_sq_antidevelopment": float(np.mean(np.sum(w * w, axis=1))),
                        "max_drift": float(rec.drift.max()) if rec.drift.size else 0.0})
    _write_atomic(os.path.join(out, "simulate-paths.json"), _dumps(summary))
    return EXIT_OK


def cmd_check_supersolution(cfg, out):
    fam = make_family(cfg["family"])
    T, s = float(cfg["T"]), float(cfg["s"])
    reports, verdicts = [], []
    for x, c in zip(cfg["points"], _charts(cfg)):
        times = np.linspace(s, T, 3)
        eig = np.concatenate([ricci_flow_defect(fam, c, np.asarray(x, float), t).eigenvalues
                              for t in times])
        tag = classify_eigenvalues(eig)
        v1 = est.HOLDS if tag in ("zero", "nonneg") else est.VIOLATED
        verdicts.append(v1)
        reports.append({"check": "S1", "family": fam.config(), "params": {"x": x, "T": T, "s": s},
                        "lhs": {"mean": 0.0, "stderr": 0.0}, "rhs": {"mean": float(eig.min()), "stderr": 0.0},
                        "margin": float(eig.min()), "stderr": 0.0, "verdict": v1,
                        "budgets": {}, "seeds": [], "bias_terms": {}, "tag": tag})
        for f in cfg["functions"]:
            for row in supersolution_rows(fam, x, T, s, make_scalar(f), chart=c):
                v = est.HOLDS if row.margin >= -S_TOL else est.VIOLATED
                verdicts.append(v)
                reports.append({"check": row.check, "family": fam.config(),
                                "params": {"x": x, "T": T, "s": s, "function": row.function},
                                "lhs": {"mean": row.lhs, "stderr": 0.0},
                                "rhs": {"mean": row.rhs, "stderr": 0.0}, "margin": row.margin,
                                "stderr": 0.0, "verdict": v, "budgets": {"tolerance": S_TOL},
                                "seeds": [], "bias_terms": {}, "ratio": row.ratio})
    _emit(out, "check-supersolution", reports)
    return _exit_code(verdicts)


def _run_checks(cmd, cfg, out, runners):
    fam = make_family(cfg["family"])
    T = float(cfg["T"])
    b = _budgets(cfg)
    reports = []
    for x, c in zip(cfg["points"], _charts(cfg)):
        F = _F(cfg, fam, x, T)
        for run in runners:
            reports.append(run(fam, x, T, F, b, c))
    _emit(out, cmd, reports)
    return _exit_code([r.verdict for r in reports])


def cmd_check_gradient(cfg, out):
    return _run_checks("check-gradient", cfg, out, [
        lambda fam, x, T, F, b, c: est.check_R2(fam, x, T, F, b, c),
        lambda fam, x, T, F, b, c: est.check_R2prime(fam, x, T, F, b, c),
    ])


def cmd_check_martingale(cfg, out):
    tau = float(cfg.get("windows", {}).get("tau", 0.0))
    return _run_checks("check-martingale", cfg, out, [
        lambda fam, x, T, F, b, c: est.check_R3(fam, x, T, F, tau, b, c),
        lambda fam, x, T, F, b, c: est.check_R3prime(fam, x, T, F, tau, b, c),
    ])


def _window(cfg):
    w = cfg.get("windows", {})
    return float(w.get("tau1", 0.0)), float(w.get("tau2", cfg["T"]))


def cmd_check_logsob(cfg, out):
    t1, t2 = _window(cfg)
    return _run_checks("check-logsob", cfg, out, [
        lambda fam, x, T, F, b, c: est.check_R4(fam, x, T, F, t1, t2, b, c)])


def cmd_check_gap(cfg, out):
    t1, t2 = _window(cfg)
    return _run_checks("check-gap", cfg, out, [
        lambda fam, x, T, F, b, c: est.check_R5(fam, x, T, F, t1, t2, b, c)])


def cmd_check_ibp(cfg, out):
    G, V = make_cylinder(cfg["G"]), make_variation(cfg["variation"])
    return _run_checks("check-ibp", cfg, out, [
        lambda fam, x, T, F, b, c: est.check_ibp(fam, x, T, F, G, V, b, c)])


def cmd_detect_ricci(cfg, out):
    fam = make_family(cfg["family"])
    T = float(cfg["T"])
    b = _budgets(cfg)
    pr = cfg.get("probe", {})
    sigma = float(pr.get("sigma", 0.05))
    rich = bool(pr.get("richardson", False))
    tol = float(pr.get("tolerance", 0.02))
    rng_ = np.random.default_rng(b["seed"])
    reports, flags = [], []
    for x, c in zip(cfg["points"], _charts(cfg)):
        x = np.asarray(x, float)
        dirs = pr.get("directions") or [None] * int(pr.get("n_directions", 1))
        for d in dirs:
            v = random_unit_vector(fam, x, T, rng_, c) if d is None else np.asarray(d, float)
            v = v / np.sqrt(v @ fam.metric(x, T, c) @ v)
            r = ricci_defect_probe(fam, x, T, v, sigma, int(b.get("N", 20000)),
                                   float(b.get("dtau", 1e-3)), b["seed"], richardson=rich,
                                   jobs=b["jobs"], chart=c)
            S = ricci_flow_defect(fam, c, x, T).S
            zero = abs(r.probe_value) <= tol + 3 * r.stderr
            flags.append(zero)
            d = r.to_dict()
            d.update({"check": "probe", "x": x.tolist(), "v": v.tolist(), "chart": int(c),
                      "defect_vv_half": 0.5 * float(v @ S @ v),
                      "verdict": "solution" if zero else "defect"})
            reports.append(d)
    verdict = "solution" if all(flags) else "not a Ricci flow"
    os.makedirs(out, exist_ok=True)
    _write_atomic(os.path.join(out, "detect-ricci.json"),
                  _dumps({"family": fam.config(), "verdict": verdict, "probes": reports}))
    buf = ["x,v,probe_value,stderr,sigma,richardson,verdict"]
    for d in reports:
        buf.append(f"\"{d['x']}\",\"{d['v']}\",{d['probe_value']!r},{d['stderr']!r},{d['sigma']!r},"
                   f"{d['richardson']},{d['verdict']}")
    _write_atomic(os.path.join(out, "detect-ricci.csv"), "\n".join(buf) + "\n")
    return EXIT_OK if all(flags) else EXIT_VIOLATION


def _vector_field(spec):
    kind = spec.get("type")
    if kind == "constant":
        return ConstantField(spec["z"])
    if kind == "gradient":
        return GradientField(spec["f"])
    if kind == "coordinate":
        return CoordinateField(spec["f"], spec.get("component", 0))
    raise ConfigError(f"field 'Z.type': unknown vector field '{kind}'")


def _potential(spec):
    if spec in (None, "zero"):
        return None
    if spec == "ricci":
        return "ricci"
    if isinstance(spec, dict) and spec.get("type") == "scalar":
        return ScalarPotential(spec["a"])
    raise ConfigError("field 'A' must be null, 'zero', 'ricci' or {type: scalar, a}")


def cmd_fk_solve(cfg, out):
    fam = make_family(cfg["family"])
    T, s = float(cfg["T"]), float(cfg["s"])
    b = _budgets(cfg)
    Z, A = _vector_field(cfg["Z"]), _potential(cfg.get("A"))
    rows = []
    for x, c in zip(cfg["points"], _charts(cfg)):
        mean, e = fk_solve_vector(fam, Z, A, s, x, T, int(b.get("N", 20000)),
                                  float(b.get("dtau", 1e-3)), b["seed"], b["jobs"], c)
        rows.append({"x": list(map(float, x)), "chart": int(c), "Y": np.asarray(mean).tolist(),
                     "frame_components": e.to_dict()})
    os.makedirs(out, exist_ok=True)
    _write_atomic(os.path.join(out, "fk-solve.json"), _dumps({"family": fam.config(), "results": rows}))
    buf = ["x,Y,stderr"]
    for r in rows:
        buf.append(f"\"{r['x']}\",\"{r['Y']}\",\"{r['frame_components']['stderr']}\"")
    _write_atomic(os.path.join(out, "fk-solve.csv"), "\n".join(buf) + "\n")
    return EXIT_OK


COMMANDS = {
    "simulate-paths": cmd_simulate_paths,
    "check-supersolution": cmd_check_supersolution,
    "check-gradient": cmd_check_gradient,
    "check-martingale": cmd_check_martingale,
    "check-logsob": cmd_check_logsob,
    "check-gap": cmd_check_gap,
    "check-ibp": cmd_check_ibp,
    "detect-ricci": cmd_detect_ricci,
    "fk-solve": cmd_fk_solve,
}


def run(cmd, cfg, out=None):
    """Validate and execute one subcommand; returns the exit code."""
    validate(cmd, cfg)
    # precedence: --out flag, then the environment override, then the config
    out = out or os.environ.get(OUT_ENV) or cfg.get("out") or "ricci-paths-out"
    t0 = time.time()
    code = COMMANDS[cmd](cfg, out)
    # timing lives in its own file so report payloads stay reproducible
    _write_atomic(os.path.join(out, f"{cmd}.timing.json"),
                  _dumps({"started": t0, "seconds": time.time() - t0, "exit": code}))
    return code


def build_parser():
    p = argparse.ArgumentParser(prog="ricci-paths", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", required=True, help="JSON run config")
    p.add_argument("--out", help="output directory")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--jobs", type=int, help="worker processes")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        with open(args.config) as fh:
            cfg = json.load(fh)
        if args.seed is not None:
            cfg["seed"] = args.seed
        if args.jobs is not None:
            cfg["jobs"] = args.jobs
        return run(args.command, cfg, args.out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except (OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except (ValueError, FloatingPointError, RuntimeError) as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
