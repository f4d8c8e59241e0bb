"""Statistical checks of the path-space inequalities and family classification.

Every check returns a CheckReport whose verdict is three-valued:
holds if margin >= -3 se, violated if margin < -3 se and |margin| exceeds the
systematic-bias bound, inconclusive otherwise. ``se`` pools the standard
errors of both sides; the bias bound sums the entries of ``bias_terms``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import partial

import numpy as np

from . import framebundle as fb
from . import rng
from .feynman_kac import conjugated_generator, random_unit_vector, ricci_defect_probe
from .functions import RicciPotential, SquaredCylinder, make_cylinder, make_variation
from .geometry import EPS_CLASSIFY, ricci_flow_defect, make_family
from .mc import MCEstimate, batches, pooled_stderr, run_batches
from .pathspace import (
    chain_rule_derivative,
    evaluate,
    gradient_samples,
    horizon_of,
    martingale_path,
    ou_quadratic_form,
    parallel_gradient_frame,
    slot_indices,
    snap_index,
    conditional_expectation,
)

DEFAULT_BUDGETS = {"N": 20000, "N_inner": 500, "dtau": 1e-3, "seed": 0, "h": 1e-3, "c_dtau": 2.0,
                   "jobs": 1, "panel": 100, "M": 200}

HOLDS, VIOLATED, INCONCLUSIVE = "holds", "violated", "inconclusive"


def _budgets(b):
    out = dict(DEFAULT_BUDGETS)
    out.update(b or {})
    return out


def verdict(margin, se, bias=0.0, rhs=None, rel_budget=None):
    if rel_budget is not None and rhs is not None and rhs != 0 and se > rel_budget * abs(rhs):
        return INCONCLUSIVE
    if margin >= -3 * se:
        return HOLDS
    if abs(margin) > bias:
        return VIOLATED
    return INCONCLUSIVE


@dataclass
class CheckReport:
    check: str
    family: dict
    params: dict
    lhs: MCEstimate
    rhs: MCEstimate
    budgets: dict
    bias_terms: dict = field(default_factory=dict)
    rel_budget: float = None
    extra: dict = field(default_factory=dict)

    @property
    def margin(self):
        return float(self.rhs.mean - self.lhs.mean)

    @property
    def stderr(self):
        return pooled_stderr(self.lhs.stderr, self.rhs.stderr)

    @property
    def bias(self):
        return float(sum(abs(v) for v in self.bias_terms.values()))

    @property
    def verdict(self):
        if "verdict" in self.extra:
            return self.extra["verdict"]
        return verdict(self.margin, self.stderr, self.bias, self.rhs.mean, self.rel_budget)

    def to_dict(self):
        d = {"check": self.check, "family": self.family, "params": self.params,
             "lhs": self.lhs.to_dict(), "rhs": self.rhs.to_dict(), "margin": self.margin,
             "stderr": self.stderr, "verdict": self.verdict,
             # the worker count never changes results, so it stays out of the payload
             "budgets": {k: v for k, v in self.budgets.items() if k != "jobs"},
             "seeds": [int(self.budgets["seed"])], "bias_terms": self.bias_terms}
        d.update({k: v for k, v in self.extra.items() if k != "verdict"})
        return d

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True, default=_jsonable)


def _jsonable(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.generic):
        return o.item()
    raise TypeError(type(o))


def _params(x, T, F, **kw):
    p = {"x": np.asarray(x, float).tolist(), "T": float(T), "F": make_cylinder(F).config()}
    p.update(kw)
    return p


# gradient inequalities --------------------------------------------------------------


def _norm_estimate(samples, seed, dtau):
    """|mean vector| with a delta-method standard error."""
    a = np.asarray(samples, float)
    n = a.shape[0]
    m = a.mean(axis=0)
    nm = float(np.linalg.norm(m))
    cov = np.cov(a, rowvar=False).reshape(a.shape[1], a.shape[1]) if n > 1 else np.zeros((1, 1))
    if nm > 0:
        u = m / nm
        se = float(np.sqrt(max(u @ cov @ u, 0.0) / n))
    else:
        se = float(np.sqrt(np.trace(cov) / n))
    return MCEstimate(nm, se, n, seed, dtau, se * se * n)


def _gradient_check(name, family, x, T, F, budgets, chart, squared):
    b = _budgets(budgets)
    fam = make_family(family)
    F = make_cylinder(F)
    seed, dtau, N = int(b["seed"]), float(b["dtau"]), int(b["N"])
    bias = {"discretization": b["c_dtau"] * dtau, "finite_difference": b["h"] ** 2}
    if F.k == 0:
        z = MCEstimate.exact(0.0, seed, dtau, N)
        return CheckReport(name, fam.config(), _params(x, T, F), z, z, b, bias, 0.1)
    _, par, fd, _ = gradient_samples(F, fam, x, T, N, dtau, seed, b["h"], None, b["jobs"], chart)
    lhs = _norm_estimate(fd, seed, dtau)
    norms = np.linalg.norm(par, axis=1)
    if squared:
        # |E fd|^2 by the delta method, minus the O(1/N) upward bias of a squared mean
        cov = np.cov(fd, rowvar=False).reshape(fam.n, fam.n)
        val = lhs.mean**2 - np.trace(cov) / N
        lhs = MCEstimate(float(val), 2 * lhs.mean * lhs.stderr, N, seed, dtau)
        rhs = MCEstimate.from_samples(norms**2, seed, dtau)
    else:
        rhs = MCEstimate.from_samples(norms, seed, dtau)
    return CheckReport(name, fam.config(), _params(x, T, F), lhs, rhs, b, bias, 0.1)


def check_R2(family, x, T, F, budgets=None, chart=0) -> CheckReport:
    """|grad_x E F| <= E |parallel gradient of F|."""
    return _gradient_check("R2", family, x, T, F, budgets, chart, squared=False)


def check_R2prime(family, x, T, F, budgets=None, chart=0) -> CheckReport:
    """|grad_x E F|^2 <= E |parallel gradient of F|^2."""
    return _gradient_check("R2'", family, x, T, F, budgets, chart, squared=True)


# martingale inequalities ------------------------------------------------------------


def _martingale_worker(F, family, x, T, dtau, seed, horizon, chart, partition, n_inner, tau, ids):
    rec = fb.sample_paths(family, x, T, dtau, seed, ids, horizon=horizon, chart=chart)
    ms = martingale_path(F, rec, partition, n_inner, seed)
    par = parallel_gradient_frame(F, rec, tau) if tau is not None else None
    return ms.values, ms.noise_var, par


def _martingale_samples(F, fam, x, T, partition, b, chart, tau=None):
    dtau, seed = float(b["dtau"]), int(b["seed"])
    horizon = max(horizon_of(F, dtau, T), dtau)
    work = partial(_martingale_worker, F, fam, np.asarray(x, float), T, dtau, seed, horizon, chart,
                   partition, int(b["N_inner"]), tau)
    parts = run_batches(work, batches(int(b["N"])), b["jobs"])
    vals = np.concatenate([p[0] for p in parts])
    noise = np.concatenate([p[1] for p in parts])
    par = np.concatenate([p[2] for p in parts]) if tau is not None else None
    return vals, noise, par


def check_R3(family, x, T, F, tau, budgets=None, chart=0) -> CheckReport:
    """E (d[F]/dtau at tau) <= 2 E |parallel gradient at tau|^2.

    The rate is E (F^{tau+eps} - F^tau)^2 / eps at eps = 2 dtau and 4 dtau,
    bias-corrected for the inner noise and extrapolated linearly to eps = 0.
    """
    b = _budgets(budgets)
    fam = make_family(family)
    F = make_cylinder(F)
    seed, dtau, N = int(b["seed"]), float(b["dtau"]), int(b["N"])
    params = _params(x, T, F, tau=float(tau))
    bias = {"discretization": b["c_dtau"] * dtau}
    ks = slot_indices(F, dtau, T) if F.k else []
    kt = snap_index(tau, dtau, T)
    if F.k == 0 or kt >= max(ks):
        z = MCEstimate.exact(0.0, seed, dtau, N)
        return CheckReport("R3", fam.config(), params, z, z, b, bias)
    e1, e2 = 2 * dtau, 4 * dtau
    partition = [kt * dtau, kt * dtau + e1, kt * dtau + e2]
    vals, noise, par = _martingale_samples(F, fam, x, T, partition, b, chart, tau=kt * dtau)
    r1 = ((vals[:, 1] - vals[:, 0]) ** 2 - noise[:, 1] - noise[:, 0]) / e1
    r2 = ((vals[:, 2] - vals[:, 0]) ** 2 - noise[:, 2] - noise[:, 0]) / e2
    lhs = MCEstimate.from_samples(2 * r1 - r2, seed, dtau)
    rhs = MCEstimate.from_samples(2 * np.sum(par**2, axis=1), seed, dtau)
    bias["nested"] = float(np.mean(noise[:, 1] + noise[:, 0])) / e1 / np.sqrt(N)
    extra = {"rate_eps": {str(e1): float(r1.mean()), str(e2): float(r2.mean())}}
    return CheckReport("R3", fam.config(), params, lhs, rhs, b, bias, extra=extra)


def check_R3prime(family, x, T, F, tau, budgets=None, chart=0) -> CheckReport:
    """Pathwise sqrt(d[F]/dtau) <= sqrt(2) E[|parallel gradient at tau| | prefix].

    A panel of base paths is frozen up to tau. For each, M continuations give
    F^{tau+eps} (each by its own inner average) and the conditional mean of the
    parallel-gradient norm; F^tau is an inner average from the prefix itself.
    The check holds if at least 95% of the panel satisfies
    ratio <= 1 + 3 (pathwise stderr of the ratio).
    """
    b = _budgets(budgets)
    fam = make_family(family)
    F = make_cylinder(F)
    seed, dtau = int(b["seed"]), float(b["dtau"])
    P, M, Ni = int(b["panel"]), int(b["M"]), int(b["N_inner"])
    params = _params(x, T, F, tau=float(tau))
    kt = snap_index(tau, dtau, T)
    ks = slot_indices(F, dtau, T) if F.k else []
    if F.k == 0 or kt >= max(ks):
        z = MCEstimate.exact(0.0, seed, dtau, P)
        return CheckReport("R3'", fam.config(), params, z, z, b, {},
                           extra={"verdict": HOLDS, "passed": P, "panel": P})
    horizon = max(ks) * dtau
    work = partial(_panel_worker, F, fam, np.asarray(x, float), T, dtau, seed, kt, horizon, M, Ni,
                   chart)
    parts = run_batches(work, batches(P, 8), b["jobs"])
    lhs_p, rhs_p, ratio, rse = (np.concatenate(a) for a in zip(*parts))
    ok = ratio <= 1 + 3 * rse
    passed = int(np.sum(ok))
    v = HOLDS if passed >= int(np.ceil(0.95 * P)) else VIOLATED
    lhs = MCEstimate.from_samples(lhs_p, seed, dtau)
    rhs = MCEstimate.from_samples(rhs_p, seed, dtau)
    extra = {"verdict": v, "passed": passed, "panel": P,
             "max_ratio": float(np.max(ratio)), "median_ratio": float(np.median(ratio))}
    return CheckReport("R3'", fam.config(), params, lhs, rhs, b, {}, extra=extra)


def _panel_worker(F, fam, x, T, dtau, seed, kt, horizon, M, Ni, chart, idx):
    ids = [(rng.PANEL, int(i)) for i in idx]
    rec = fb.sample_paths(fam, x, T, dtau, seed, idx, horizon=kt * dtau, chart=chart)
    ftau = conditional_expectation(F, rec, kt * dtau, Ni, seed)
    cont = fb.continuations(rec, kt, M, seed, ids, horizon)
    comp = fb.splice(rec, kt, cont)
    B = rec.n_paths
    gnorm = np.linalg.norm(parallel_gradient_frame(F, comp, kt * dtau), axis=1).reshape(B, M)
    rates = []
    for e in (2 * dtau, 4 * dtau):
        fe = conditional_expectation(F, comp, kt * dtau + e, Ni, seed)
        d = (fe.mean.reshape(B, M) - ftau.mean[:, None]) ** 2 - fe.noise_var.reshape(B, M)
        d = d - ftau.noise_var[:, None]
        rates.append(d / e)
    r = 2 * rates[0] - rates[1]
    rate, rate_se = r.mean(axis=1), r.std(axis=1, ddof=1) / np.sqrt(M)
    g, g_se = gnorm.mean(axis=1), gnorm.std(axis=1, ddof=1) / np.sqrt(M)
    lhs = np.sqrt(np.maximum(rate, 0.0))
    rhs = np.sqrt(2.0) * g
    safe = np.where(rhs > 0, rhs, np.inf)
    ratio = lhs / safe
    # delta method: d sqrt(rate) = rate_se / (2 sqrt(rate)), floored at sqrt(rate_se)
    lhs_se = np.where(rate > rate_se, rate_se / (2 * np.sqrt(np.maximum(rate, 1e-300))), np.sqrt(rate_se))
    rse = np.sqrt((lhs_se / safe) ** 2 + (ratio * np.sqrt(2.0) * g_se / safe) ** 2)
    return lhs, rhs, ratio, rse


def check_R4(family, x, T, F, tau1, tau2, budgets=None, chart=0) -> CheckReport:
    """E[phi((F^2)^{tau2}) - phi((F^2)^{tau1})] <= 4 E int |parallel gradient|^2, phi = y log y.

    Inner noise in Y = (F^2)^tau inflates E phi(Y) by about Var/(2Y); that
    term is subtracted at each end.
    """
    b = _budgets(budgets)
    fam = make_family(family)
    F = make_cylinder(F)
    seed, dtau, N = int(b["seed"]), float(b["dtau"]), int(b["N"])
    params = _params(x, T, F, tau1=float(tau1), tau2=float(tau2))
    bias = {"discretization": b["c_dtau"] * dtau}
    if F.k == 0:
        z = MCEstimate.exact(0.0, seed, dtau, N)
        return CheckReport("R4", fam.config(), params, z, z, b, bias)
    F2 = SquaredCylinder(F)
    vals, noise, _ = _martingale_samples(F2, fam, x, T, [tau1, tau2], b, chart)
    if np.min(vals) <= 0:
        raise ValueError("F^2 must stay bounded away from zero for the entropy check")
    phi = vals * np.log(vals) - noise / (2 * vals)
    lhs = MCEstimate.from_samples(phi[:, 1] - phi[:, 0], seed, dtau)
    ou = ou_quadratic_form(F, fam, x, T, tau1, tau2, N, dtau, seed, b["jobs"])
    rhs = MCEstimate(4 * ou.mean, 4 * ou.stderr, ou.n, seed, dtau)
    return CheckReport("R4", fam.config(), params, lhs, rhs, b, bias)


def check_R5(family, x, T, F, tau1, tau2, budgets=None, chart=0) -> CheckReport:
    """E (F^{tau2} - F^{tau1})^2 <= 2 E int_{tau1}^{tau2} |parallel gradient|^2."""
    b = _budgets(budgets)
    fam = make_family(family)
    F = make_cylinder(F)
    seed, dtau, N = int(b["seed"]), float(b["dtau"]), int(b["N"])
    params = _params(x, T, F, tau1=float(tau1), tau2=float(tau2))
    bias = {"discretization": b["c_dtau"] * dtau}
    if F.k == 0:
        z = MCEstimate.exact(0.0, seed, dtau, N)
        return CheckReport("R5", fam.config(), params, z, z, b, bias)
    vals, noise, _ = _martingale_samples(F, fam, x, T, [tau1, tau2], b, chart)
    sq = (vals[:, 1] - vals[:, 0]) ** 2 - noise[:, 1] - noise[:, 0]
    lhs = MCEstimate.from_samples(sq, seed, dtau)
    ou = ou_quadratic_form(F, fam, x, T, tau1, tau2, N, dtau, seed, b["jobs"])
    rhs = MCEstimate(2 * ou.mean, 2 * ou.stderr, ou.n, seed, dtau)
    return CheckReport("R5", fam.config(), params, lhs, rhs, b, bias)


# integration by parts ----------------------------------------------------------------


def ito_integral(record, V):
    """Left-point sum of <z_k, dW_k> with z = e_0^{-1} vdot - e_k^{-1} S e_k e_0^{-1} v.

    S = (Ric + 1/2 dg/dt)^sharp at (X_k, T - tau_k). In frame components
    e_k^{-1} S e_k is minus the conjugated Ricci generator.
    """
    A = conjugated_generator(record, RicciPotential())
    e0inv = np.linalg.inv(record.e[:, 0])
    out = np.zeros(record.n_paths)
    for k in range(record.n_steps):
        tau = record.taus[k]
        v = e0inv @ np.asarray(V.value(tau), float)
        vd = e0inv @ np.asarray(V.deriv(tau), float)
        z = vd + (A[:, k] @ v[..., None])[..., 0]
        out += np.sum(z * record.dW[:, k], axis=-1)
    return out


def _ibp_worker(F, G, V, family, x, T, dtau, seed, horizon, chart, ids):
    rec = fb.sample_paths(family, x, T, dtau, seed, ids, horizon=horizon, chart=chart)
    f, g = evaluate(F, rec), evaluate(G, rec)
    dvf, dvg = chain_rule_derivative(F, rec, V), chain_rule_derivative(G, rec, V)
    return dvf * g, f * (-dvg + 0.5 * g * ito_integral(rec, V))


def check_ibp(family, x, T, F, G, V, budgets=None, chart=0) -> CheckReport:
    """E[D_V F G] = E[F D_V^* G], D_V^* G = -D_V G + 1/2 G int <z, dW>.

    Reported as a two-sided check: margin is RHS - LHS, and the verdict
    "holds" means |margin| <= 3 pooled se + bias.
    """
    b = _budgets(budgets)
    fam = make_family(family)
    F, G, V = make_cylinder(F), make_cylinder(G), make_variation(V)
    seed, dtau, N = int(b["seed"]), float(b["dtau"]), int(b["N"])
    params = _params(x, T, F, G=G.config(), V=V.config())
    bias = {"discretization": b["c_dtau"] * dtau}
    horizon = max(horizon_of(F, dtau, T), horizon_of(G, dtau, T), dtau)
    work = partial(_ibp_worker, F, G, V, fam, np.asarray(x, float), T, dtau, seed, horizon, chart)
    parts = run_batches(work, batches(N), b["jobs"])
    left = np.concatenate([p[0] for p in parts])
    right = np.concatenate([p[1] for p in parts])
    lhs = MCEstimate.from_samples(left, seed, dtau)
    rhs = MCEstimate.from_samples(right, seed, dtau)
    rep = CheckReport("IBP", fam.config(), params, lhs, rhs, b, bias)
    gap = abs(rep.margin)
    tol = 3 * rep.stderr + rep.bias
    paired = MCEstimate.from_samples(right - left, seed, dtau)
    rep.extra = {"verdict": HOLDS if gap <= tol else VIOLATED, "tolerance": tol,
                 "paired_stderr": paired.stderr}
    return rep


# classification ------------------------------------------------------------------------


SOLUTION = "solution"
SUPER = "strict supersolution"
SUB = "strict subsolution"
NEITHER = "neither"


def _sample_points(fam, m, rng_):
    if hasattr(fam, "to_ambient"):
        p = rng_.standard_normal((m, 3))
        p /= np.linalg.norm(p, axis=1, keepdims=True)
        return fam.from_ambient(p)
    return np.zeros(m, dtype=int), rng_.uniform(0, 2 * np.pi, (m, fam.n))


def classify_family(family, plan=None):
    """Sweep the defect tensor, then cross-check its sign with the path probe.

    ``plan`` keys: points (20), times (list of metric times), probes (5), T
    (probe time), N, dtau, sigma, seed, probe_tol.
    """
    fam = make_family(family)
    p = {"points": 20, "probes": 5, "N": 4000, "dtau": 1e-3, "sigma": 0.05, "seed": 0,
         "probe_tol": 0.05}
    p.update(plan or {})
    tmax = min(fam.t_max, 1.0)
    times = p.get("times") or list(np.linspace(0, 0.9 * tmax, 4))
    T = p.get("T") or 0.6 * tmax
    rng_ = np.random.default_rng(p["seed"])
    ch, xs = _sample_points(fam, p["points"], rng_)
    eig = []
    for t in times:
        for c, xx in zip(ch, xs):
            eig.append(ricci_flow_defect(fam, int(c), xx, t).eigenvalues)
    eig = np.concatenate(eig)
    lo, hi = float(eig.min()), float(eig.max())
    if max(abs(lo), abs(hi)) <= EPS_CLASSIFY:
        tensor = SOLUTION
    elif lo >= -EPS_CLASSIFY:
        tensor = SUPER
    elif hi <= EPS_CLASSIFY:
        tensor = SUB
    else:
        tensor = NEITHER
    probes = []
    ch, xs = _sample_points(fam, p["probes"], rng_)
    for c, xx in zip(ch, xs):
        v = random_unit_vector(fam, xx, T, rng_, int(c))
        expected = ricci_flow_defect(fam, int(c), xx, T).S
        expected = 0.5 * float(v @ expected @ v)
        r = ricci_defect_probe(fam, xx, T, v, p["sigma"], p["N"], p["dtau"], p["seed"], chart=int(c))
        probes.append({"chart": int(c), "x": xx.tolist(), "v": v.tolist(), "probe": r.probe_value,
                       "stderr": r.stderr, "expected": expected})
    consistent = True
    for pr in probes:
        tol = 3 * pr["stderr"] + p["probe_tol"]
        val = pr["probe"]
        if tensor == SOLUTION and abs(val) > tol:
            consistent = False
        if tensor == SUPER and val < -tol:
            consistent = False
        if tensor == SUB and val > tol:
            consistent = False
    label = tensor if consistent else f"{NEITHER} (inconsistent)"
    return {"classification": label, "tensor": tensor, "eigen_range": [lo, hi],
            "probes": probes, "plan": {k: v for k, v in p.items()}}
