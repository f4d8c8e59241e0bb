"""Path-space calculus for cylinder functions.

Gradients along a path are handled in moving-frame coordinates: for slot j at
grid index k_j the vector h_j = e_{k_j}^{-1} grad^(j) u holds the components of
P_{s_j} grad^(j) u in the orthonormal frame e_0 at the base point. Norms in
(T_xM, g_T) are then plain Euclidean norms, and chart vectors at the base are
recovered as e_0 h.

Conditional expectations freeze the path prefix and average over fresh
continuations started from the recorded frame-bundle state.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from functools import partial

import numpy as np

from . import framebundle as fb
from .functions import ConstantCylinder, make_cylinder
from .geometry import DomainError, exp_map, make_family
from .mc import MCEstimate, batches, run_batches

INNER_CHUNK = 8192


def snap_index(s, dtau, T):
    """Grid index of evaluation time s; warns when s is off the grid."""
    if s < -1e-12 or s > T + 0.5 * dtau:
        raise DomainError(f"evaluation time {s} outside [0, {T}]")
    k = int(round(s / dtau))
    gap = abs(k * dtau - s)
    if gap > 1e-9 * max(1.0, dtau):
        warnings.warn(f"evaluation time {s} snapped to grid time {k * dtau}", stacklevel=2)
    return min(k, int(round(T / dtau)))


def slot_indices(F, dtau, T):
    return [snap_index(s, dtau, T) for s in F.times]


def horizon_of(F, dtau, T):
    ks = slot_indices(F, dtau, T)
    return (max(ks) if ks else 0) * dtau


def _points(record, ks):
    return [(record.chart[:, k], record.x[:, k]) for k in ks]


def _value(F, family, pts, B):
    if F.k == 0:
        return np.full(B, F.c if isinstance(F, ConstantCylinder) else float(F.value(family, pts)))
    return np.asarray(F.value(family, pts), dtype=float)


def evaluate(F, record) -> np.ndarray:
    """F on every path of the record, shape (B,)."""
    F = make_cylinder(F)
    ks = slot_indices(F, record.dtau, record.T)
    if ks and max(ks) > record.n_steps:
        raise DomainError("record is shorter than the last evaluation time")
    return _value(F, record.family, _points(record, ks), record.n_paths)


def slot_frame_gradients(F, record):
    """(ks, hs): grid indices and frame components h_j of P_{s_j} grad^(j) u."""
    F = make_cylinder(F)
    fam = record.family
    ks = slot_indices(F, record.dtau, record.T)
    pts = _points(record, ks)
    hs = []
    for k, (c, x), du in zip(ks, pts, F.differentials(fam, pts)):
        g = fam.metric(x, record.time(k), c)
        grad = np.linalg.solve(g, du[..., None])
        hs.append(np.linalg.solve(record.e[:, k], grad)[..., 0])
    return ks, hs


def parallel_gradient_frame(F, record, sigma=0.0):
    """Sum over slots with s_j >= sigma of h_j, shape (B, n)."""
    ks, hs = slot_frame_gradients(F, record)
    kq = snap_index(sigma, record.dtau, record.T)
    out = np.zeros((record.n_paths, record.family.n))
    for k, h in zip(ks, hs):
        if k >= kq:
            out += h
    return out


def parallel_gradient(F, record, sigma=0.0) -> np.ndarray:
    """The sigma-parallel gradient as chart vectors at the base point, (B, n)."""
    h = parallel_gradient_frame(F, record, sigma)
    return (record.e[:, 0] @ h[..., None])[..., 0]


def _tail_sums(ks, hs, B, n):
    """Per slot j: sum_{l >= j} h_l, with slots sorted by time."""
    tails = []
    acc = np.zeros((B, n))
    for h in reversed(hs):
        acc = acc + h
        tails.append(acc)
    return tails[::-1]


def window_energy(F, record, tau1, tau2) -> np.ndarray:
    """Exact integral of |parallel gradient at tau|^2 over (tau1, tau2], per path."""
    ks, hs = slot_frame_gradients(F, record)
    B, n = record.n_paths, record.family.n
    out = np.zeros(B)
    if not ks:
        return out
    tails = _tail_sums(ks, hs, B, n)
    edges = [0.0] + [k * record.dtau for k in ks]
    for j in range(len(ks)):
        lo, hi = max(edges[j], tau1), min(edges[j + 1], tau2)
        if hi > lo:
            out += (hi - lo) * np.sum(tails[j] ** 2, axis=-1)
    return out


def malliavin_norm_sq(F, record) -> np.ndarray:
    """sum_j (s_j - s_{j-1}) |sum_{l >= j} P_{s_l} grad^(l) u|^2 with s_0 = 0."""
    return window_energy(F, record, 0.0, record.T)


# Monte Carlo over paths -------------------------------------------------------


def _batch_worker(fn, family, x, T, dtau, seed, horizon, chart, frame, ids):
    rec = fb.sample_paths(family, x, T, dtau, seed, ids, horizon=horizon, chart=chart, frame=frame)
    return fn(rec)


def path_samples(fn, family, x, T, N, dtau, seed, horizon, jobs=1, chart=0, frame=None):
    """Stack fn(record) over N main-stream paths, batch by batch."""
    family = make_family(family)
    work = partial(_batch_worker, fn, family, np.asarray(x, float), T, dtau, seed, horizon, chart, frame)
    parts = run_batches(work, batches(N), jobs)
    if isinstance(parts[0], tuple):
        return tuple(np.concatenate(p, axis=0) for p in zip(*parts))
    return np.concatenate(parts, axis=0)


def expectation(F, family, x, T, N, dtau, seed, jobs=1, chart=0) -> MCEstimate:
    """Monte Carlo estimate of E_(x,T) F."""
    F = make_cylinder(F)
    if N < 2:
        raise ValueError("need N >= 2")
    if F.k == 0:
        return MCEstimate.exact(F.c, seed, dtau, N)
    fam = make_family(family)
    vals = path_samples(partial(evaluate, F), fam, x, T, N, dtau, seed, horizon_of(F, dtau, T),
                        jobs, chart)
    return MCEstimate.from_samples(vals, seed, dtau)


def _window_worker(F, tau1, tau2, rec):
    return window_energy(F, rec, tau1, tau2)


def ou_quadratic_form(F, family, x, T, tau1, tau2, N, dtau, seed, jobs=1) -> MCEstimate:
    """E int_{tau1}^{tau2} |parallel gradient|^2, the Ornstein-Uhlenbeck Dirichlet form."""
    if not 0 <= tau1 < tau2 <= T:
        raise ValueError("need 0 <= tau1 < tau2 <= T")
    F = make_cylinder(F)
    if F.k == 0:
        return MCEstimate.exact(0.0, seed, dtau, N)
    vals = path_samples(partial(_window_worker, F, tau1, tau2), family, x, T, N, dtau, seed,
                        horizon_of(F, dtau, T), jobs)
    return MCEstimate.from_samples(vals, seed, dtau)


# conditional expectations and martingales ------------------------------------


@dataclass
class NestedValue:
    """Per-path inner Monte Carlo estimates: mean, inner sample variance, count."""

    mean: np.ndarray
    var: np.ndarray
    n_inner: int

    @property
    def noise_var(self):
        """Variance of each inner mean from finite n_inner."""
        if self.n_inner <= 1:
            return np.zeros_like(self.var)
        return self.var / self.n_inner


def conditional_expectation(F, record, sigma, n_inner, seed) -> NestedValue:
    """F^sigma on each path: prefix frozen, continuation averaged over n_inner paths."""
    F = make_cylinder(F)
    B = record.n_paths
    if F.k == 0:
        return NestedValue(np.full(B, F.c), np.zeros(B), 0)
    if n_inner < 2:
        raise ValueError("need n_inner >= 2")
    fam = record.family
    kq = snap_index(sigma, record.dtau, record.T)
    ks = slot_indices(F, record.dtau, record.T)
    kmax = max(ks)
    if kq >= kmax:
        return NestedValue(evaluate(F, record), np.zeros(B), 0)
    if kq > record.n_steps:
        raise DomainError("record does not reach sigma")
    ids = record.ids or [(0, i) for i in range(B)]
    chunk = max(1, INNER_CHUNK // n_inner)
    means, vars_ = [], []
    for lo in range(0, B, chunk):
        sub = record.subset(range(lo, min(B, lo + chunk)))
        cont = fb.continuations(sub, kq, n_inner, seed, ids[lo : lo + chunk], kmax * record.dtau)
        pts = []
        for k in ks:
            if k <= kq:
                pts.append((np.repeat(sub.chart[:, k], n_inner), np.repeat(sub.x[:, k], n_inner, axis=0)))
            else:
                pts.append((cont.chart[:, k - kq], cont.x[:, k - kq]))
        vals = _value(F, fam, pts, cont.n_paths).reshape(sub.n_paths, n_inner)
        means.append(vals.mean(axis=1))
        vars_.append(vals.var(axis=1, ddof=1))
    return NestedValue(np.concatenate(means), np.concatenate(vars_), n_inner)


@dataclass
class MartingaleSample:
    partition: np.ndarray
    values: np.ndarray  # (B, P)
    noise_var: np.ndarray  # (B, P), variance of each nested value from finite n_inner
    n_inner: int


def martingale_path(F, record, partition, n_inner, seed) -> MartingaleSample:
    """F^tau at each partition time on the same base paths."""
    partition = np.asarray(partition, dtype=float)
    if np.any(np.diff(partition) <= 0):
        raise ValueError("partition must be increasing")
    vals, noise = [], []
    for tau in partition:
        nv = conditional_expectation(F, record, tau, n_inner, seed)
        vals.append(nv.mean)
        noise.append(nv.noise_var)
    return MartingaleSample(partition, np.stack(vals, axis=1), np.stack(noise, axis=1), n_inner)


@dataclass
class QuadraticVariation:
    raw: np.ndarray  # (B, P-1) cumulative sums of squared increments
    bias: np.ndarray  # (B, P-1) cumulative variance-inflation estimate
    increments: np.ndarray  # (B, P-1)

    @property
    def corrected(self):
        return self.raw - self.bias


def quadratic_variation(sample: MartingaleSample) -> QuadraticVariation:
    """Partition sums of squared martingale increments, with the nested-MC bias.

    Each nested value carries independent inner noise of variance v_k, so a
    squared increment is inflated on average by v_k + v_{k-1}; ``bias`` holds
    those sums and ``corrected`` subtracts them.
    """
    if sample.values.shape[1] < 2:
        raise ValueError("need at least two partition points")
    d = np.diff(sample.values, axis=1)
    infl = sample.noise_var[:, 1:] + sample.noise_var[:, :-1]
    return QuadraticVariation(np.cumsum(d * d, axis=1), np.cumsum(infl, axis=1), d)


def ito_isometry_pairs(sample: MartingaleSample, i, j) -> np.ndarray:
    """Per path ([F]_j - [F]_i) - (F^j - F^i)^2; its mean vanishes for a martingale."""
    d = np.diff(sample.values[:, i : j + 1], axis=1)
    return np.sum(d * d, axis=1) - (sample.values[:, j] - sample.values[:, i]) ** 2


# directional derivatives ----------------------------------------------------


def _variation_at(record, V, k):
    """V_tau = P_tau^{-1} v_tau as chart vectors at X_tau, (B, n)."""
    v = np.broadcast_to(V.value(record.taus[k]), (record.n_paths, record.family.n))
    hv = np.linalg.solve(record.e[:, 0], v[..., None])
    return (record.e[:, k] @ hv)[..., 0]


def directional_derivative(F, record, V, eps=1e-4) -> np.ndarray:
    """Central difference of F along exp-map perturbations of the path by eps V."""
    F = make_cylinder(F)
    if F.k == 0:
        return np.zeros(record.n_paths)
    fam = record.family
    ks = slot_indices(F, record.dtau, record.T)
    vals = []
    for sgn in (1.0, -1.0):
        pts = []
        for k in ks:
            Vk = _variation_at(record, V, k)
            pts.append(exp_map(fam, record.chart[:, k], record.x[:, k], sgn * eps * Vk, record.time(k)))
        vals.append(_value(F, fam, pts, record.n_paths))
    return (vals[0] - vals[1]) / (2 * eps)


def chain_rule_derivative(F, record, V) -> np.ndarray:
    """sum_j <v_{s_j}, P_{s_j} grad^(j) u>_{g_T}, the analytic D_V F."""
    F = make_cylinder(F)
    out = np.zeros(record.n_paths)
    if F.k == 0:
        return out
    ks, hs = slot_frame_gradients(F, record)
    for k, h in zip(ks, hs):
        v = np.broadcast_to(V.value(record.taus[k]), (record.n_paths, record.family.n))
        hv = np.linalg.solve(record.e[:, 0], v[..., None])[..., 0]
        out += np.sum(hv * h, axis=-1)
    return out


# common-random-number gradients of x -> E_(x,T) F ----------------------------


def shifted_bases(family, x, T, h, dirs=None, chart=0):
    """Base points exp_x(+-h d) with the base frame parallel transported along.

    ``dirs`` defaults to the columns of the base frame. Returns a list of
    (chart, point, frame) pairs ordered (+d_0, -d_0, +d_1, -d_1, ...).
    """
    fam = make_family(family)
    x = np.asarray(x, dtype=float)
    e0 = fb.initial_frame(fam, chart, x, T)
    dirs = e0.T if dirs is None else np.atleast_2d(dirs)
    out = []
    for d in dirs:
        for sgn in (1.0, -1.0):
            c, y, E = exp_map(fam, chart, x[None], sgn * h * d[None], T, transport=e0[None])
            out.append((int(c[0]), y[0], E[0]))
    return e0, out


def _gradient_worker(F, family, x, T, dtau, seed, horizon, chart, e0, shifted, h, ids):
    rec = fb.sample_paths(family, x, T, dtau, seed, ids, horizon=horizon, chart=chart, frame=e0)
    par = parallel_gradient_frame(F, rec, 0.0)
    base = evaluate(F, rec)
    fd = []
    for i in range(0, len(shifted), 2):
        (cp, yp, Ep), (cm, ym, Em) = shifted[i], shifted[i + 1]
        rp = fb.sample_paths(family, yp, T, dtau, seed, ids, horizon=horizon, chart=cp, frame=Ep)
        rm = fb.sample_paths(family, ym, T, dtau, seed, ids, horizon=horizon, chart=cm, frame=Em)
        fd.append((evaluate(F, rp) - evaluate(F, rm)) / (2 * h))
    return base, par, np.stack(fd, axis=1)


def gradient_samples(F, family, x, T, N, dtau, seed, h=1e-3, dirs=None, jobs=1, chart=0):
    """Per-path samples for gradient checks, on common random numbers.

    Returns (values, parallel gradient in frame components, finite-difference
    quotients along ``dirs``) with shapes (N,), (N, n), (N, len(dirs)). The
    parallel-gradient components pair with the quotients when ``dirs`` is the
    base frame; for general unit dirs use ``e0^{-1} d``.
    """
    F = make_cylinder(F)
    fam = make_family(family)
    x = np.asarray(x, dtype=float)
    e0, shifted = shifted_bases(fam, x, T, h, dirs, chart)
    work = partial(_gradient_worker, F, fam, x, T, dtau, seed, horizon_of(F, dtau, T), chart, e0,
                   shifted, h)
    parts = run_batches(work, batches(N), jobs)
    base, par, fd = (np.concatenate(p, axis=0) for p in zip(*parts))
    return base, par, fd, e0
