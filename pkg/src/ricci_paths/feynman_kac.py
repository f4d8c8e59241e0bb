"""Deformation ODEs along paths, the vector Feynman-Kac estimator, the
gradient formula and the two-point Ricci-defect probe.

Along a path, dR/dtau = R P_tau A_{T-tau} P_tau^{-1} with R_0 = I. Writing
everything in the base frame e_0, the conjugated generator is
Ahat_k = e_k^{-1} A(X_k, T - tau_k) e_k and Rhat' = Rhat Ahat, which is what
gets integrated.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import partial

import numpy as np

from . import framebundle as fb
from . import rng
from .functions import RicciPotential, ZeroPotential, make_cylinder, probe_function
from .geometry import make_family
from .mc import MCEstimate, batches, run_batches
from .pathspace import _tail_sums, gradient_samples, horizon_of, slot_frame_gradients, snap_index

PROBE_SIGMAS = (0.1, 0.05, 0.025)


@dataclass
class DeformationRecord:
    R: np.ndarray  # (B, K+1, n, n) in base-frame components
    A: np.ndarray  # (B, K+1, n, n) conjugated generator Ahat_k
    tag: str

    def rate(self, k):
        """dR/dtau at grid index k, from the ODE right-hand side."""
        return self.R[:, k] @ self.A[:, k]

    def in_chart(self, record, k):
        """R_tau_k as a chart endomorphism of T_xM."""
        e0 = record.e[:, 0]
        return e0 @ self.R[:, k] @ np.linalg.inv(e0)


def conjugated_generator(record, generator):
    fam = record.family
    B, K1 = record.x.shape[:2]
    n = fam.n
    A = np.empty((B, K1, n, n))
    for k in range(K1):
        a = generator(fam, record.chart[:, k], record.x[:, k], record.time(k))
        if not np.all(np.isfinite(a)):
            raise FloatingPointError(f"non-finite generator at step {k}")
        A[:, k] = np.linalg.solve(record.e[:, k], a @ record.e[:, k])
    return A


def deformation_ode(record, generator="ricci") -> DeformationRecord:
    """Integrate Rhat' = Rhat Ahat with the two-stage (Heun) RK2 rule.

    ``generator`` is a potential A(family, chart, x, t) or the tag "ricci"
    for A = -(Ric + 1/2 dg/dt).
    """
    tag = generator if isinstance(generator, str) else type(generator).__name__
    if generator == "ricci":
        generator = RicciPotential()
    elif generator == "zero":
        generator = ZeroPotential()
    A = conjugated_generator(record, generator)
    B, K1, n, _ = A.shape
    R = np.empty_like(A)
    R[:, 0] = np.eye(n)
    h = record.dtau
    for k in range(K1 - 1):
        a0, a1 = A[:, k], A[:, k + 1]
        step = np.eye(n) + 0.5 * h * (a0 + a1) + 0.5 * h * h * (a0 @ a1)
        R[:, k + 1] = R[:, k] @ step
    return DeformationRecord(R, A, tag)


# vector Feynman-Kac -------------------------------------------------------------


def _fk_worker(Z, A, s, family, x, T, dtau, seed, chart, ids):
    rec = fb.sample_paths(family, x, T, dtau, seed, ids, horizon=T - s, chart=chart)
    K = rec.n_steps
    z = Z(family, rec.chart[:, K], rec.x[:, K], rec.time(K))
    hz = np.linalg.solve(rec.e[:, K], z[..., None])
    if A is None:
        return hz[..., 0]
    dr = deformation_ode(rec, A)
    return (dr.R[:, K] @ hz)[..., 0]


def fk_solve_vector(family, Z, A, s, x, T, N, dtau, seed, jobs=1, chart=0):
    """Estimate Y(x, T) = E[R_{T-s} P_{T-s} Z(X_{T-s})].

    Returns (chart-vector mean at x, MCEstimate of components in the base frame).
    """
    if not s < T:
        raise ValueError("need s < T")
    fam = make_family(family)
    x = np.asarray(x, dtype=float)
    work = partial(_fk_worker, Z, A, s, fam, x, T, dtau, seed, chart)
    comps = np.concatenate(run_batches(work, batches(N), jobs), axis=0)
    est = MCEstimate.from_samples(comps, seed, dtau)
    e0 = fb.initial_frame(fam, chart, x, T)
    return e0 @ np.asarray(est.mean), est


# gradient formula ---------------------------------------------------------------


def gradient_terms(F, record, generator="ricci"):
    """Per-path (parallel gradient, correction) in base-frame components.

    The correction is int_0^T (dR/dtau) (parallel gradient at tau) dtau. The
    parallel gradient is constant on each grid interval (tau_k, tau_{k+1}],
    where it equals the sum over slots with s_j >= tau_{k+1}; dR/dtau is taken
    from the ODE right-hand side and integrated by the trapezoid rule.
    """
    F = make_cylinder(F)
    B, n = record.n_paths, record.family.n
    if F.k == 0:
        return np.zeros((B, n)), np.zeros((B, n))
    ks, hs = slot_frame_gradients(F, record)
    tails = _tail_sums(ks, hs, B, n)
    main = tails[0].copy()
    dr = deformation_ode(record, generator)
    corr = np.zeros((B, n))
    j = 0
    for k in range(max(ks)):
        while ks[j] < k + 1:
            j += 1
        rate = 0.5 * (dr.rate(k) + dr.rate(k + 1))
        corr += record.dtau * (rate @ tails[j][..., None])[..., 0]
    return main, corr


def _gf_worker(F, generator, family, x, T, dtau, seed, horizon, chart, ids):
    rec = fb.sample_paths(family, x, T, dtau, seed, ids, horizon=horizon, chart=chart)
    return gradient_terms(F, rec, generator)


def gradient_formula(F, family, x, T, N, dtau, seed, jobs=1, chart=0, generator="ricci"):
    """(E parallel gradient, E correction) as base-frame MCEstimates.

    Their sum estimates grad_{g_T} E_(x,T) F in the frame e_0 at x.
    """
    F = make_cylinder(F)
    fam = make_family(family)
    horizon = max(horizon_of(F, dtau, T), dtau)
    work = partial(_gf_worker, F, generator, fam, np.asarray(x, float), T, dtau, seed, horizon, chart)
    parts = run_batches(work, batches(N), jobs)
    main = np.concatenate([p[0] for p in parts])
    corr = np.concatenate([p[1] for p in parts])
    total = MCEstimate.from_samples(main + corr, seed, dtau)
    return MCEstimate.from_samples(main, seed, dtau), MCEstimate.from_samples(corr, seed, dtau), total


# Ricci-defect probe ----------------------------------------------------------------


@dataclass
class ProbeResult:
    probe_value: float
    stderr: float
    sigma: float
    richardson: bool
    n: int
    seed: int
    dtau: float
    per_sigma: dict
    systematic: str

    def to_dict(self):
        return {"probe_value": self.probe_value, "stderr": self.stderr, "sigma": self.sigma,
                "richardson": self.richardson, "n": self.n, "seed": self.seed, "dtau": self.dtau,
                "per_sigma": {str(k): v for k, v in self.per_sigma.items()},
                "systematic": self.systematic}


def _ito_controls(family, T, dtau, seed, N, sigma):
    """Mean-zero functionals of the driving noise used as control variates.

    Columns: the discrete iterated integrals sum_k W_k (x) dW_k, the endpoint
    W_sigma and W_sigma^2 - 2 sigma per component. Each has exact mean zero.
    """
    K = snap_index(sigma, dtau, T)
    cols = []
    for r in batches(N):
        dW = rng.increments(seed, [(rng.MAIN, i) for i in r], K, make_family(family).n, dtau)
        W = np.cumsum(dW, axis=1) - dW
        it = np.einsum("bka,bkc->bac", W, dW).reshape(len(r), -1)
        end = W[:, -1] + dW[:, -1]
        cols.append(np.concatenate([it, end, end**2 - 2 * K * dtau], axis=1))
    return np.concatenate(cols, axis=0)


def _probe_samples(family, x, T, v, sigma, N, dtau, seed, h, jobs, chart, weights):
    F = probe_function(family, x, T, v, sigma, weights, chart)
    _, par, fd, e0 = gradient_samples(F, family, x, T, N, dtau, seed, h, dirs=[v], jobs=jobs,
                                      chart=chart)
    pv = par @ np.linalg.solve(e0, v)
    return (fd[:, 0] - pv) / sigma


def ricci_defect_probe(family, x, T, v, sigma=0.05, N=20000, dtau=1e-3, seed=0, h=1e-3,
                       richardson=False, jobs=1, chart=0, control_variates=True,
                       weights=(2.0, -1.0)) -> ProbeResult:
    """Estimate (Ric + 1/2 dg/dt)(v, v) at (x, T) from the 2-point probe function.

    grad E F^sigma is computed by central differences of x -> E F^sigma on common
    random numbers (base frames parallel transported to the shifted points), and
    compared path by path with the parallel gradient. With ``richardson`` the
    values at sigma = 0.1, 0.05, 0.025 are extrapolated quadratically to sigma = 0.
    """
    fam = make_family(family)
    x = np.asarray(x, dtype=float)
    v = np.asarray(v, dtype=float)
    nv = float(np.sqrt(v @ fam.metric(x, T, chart) @ v))
    if abs(nv - 1) > 1e-8:
        raise ValueError(f"v must be g_T-unit, got |v| = {nv}")
    sigmas = PROBE_SIGMAS if richardson else (sigma,)
    for s in sigmas:
        if s <= 2 * dtau:
            raise ValueError(f"sigma={s} must exceed 2 dtau")
        if s > T:
            raise ValueError(f"sigma={s} exceeds T={T}")
    per = {}
    samples = {}
    for s in sigmas:
        d = _probe_samples(fam, x, T, v, s, N, dtau, seed, h, jobs, chart, weights)
        if control_variates and np.std(d) > 0:
            # the controls have exact mean zero, so the uncentred columns are subtracted
            C = _ito_controls(fam, T, dtau, seed, N, s)
            coef, *_ = np.linalg.lstsq(C - C.mean(axis=0), d - d.mean(), rcond=None)
            d = d - C @ coef
        samples[s] = d
        per[s] = {"mean": float(d.mean()), "stderr": float(d.std(ddof=1) / np.sqrt(N))}
    if richardson:
        s1, s2, s3 = sigmas
        comb = (8 * samples[s3] - 6 * samples[s2] + samples[s1]) / 3
        value, se = float(comb.mean()), float(comb.std(ddof=1) / np.sqrt(N))
    else:
        value, se = per[sigma]["mean"], per[sigma]["stderr"]
    sysnote = "none"
    if hasattr(fam, "to_ambient"):
        sysnote = "ambient-linear probe: O(sigma) curvature systematic away from the base point"
    return ProbeResult(value, se, float(sigma), bool(richardson), int(N), int(seed), float(dtau),
                       per, sysnote)


def random_unit_vector(family, x, T, rng_, chart=0):
    v = rng_.standard_normal(family.n)
    return v / np.sqrt(v @ family.metric(np.asarray(x, float), T, chart) @ v)

