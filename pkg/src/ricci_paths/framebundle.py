"""Horizontal Brownian motion on the orthonormal frame bundle.

The state is a point x in a chart together with a frame e (columns e_i are
g-orthonormal tangent vectors). Backwards time tau runs from 0 to T and the
metric is always evaluated at t = T - tau. One step of the Stratonovich SDE

    dx^a   = e^a_i dW^i
    de^a_j = -Gamma^a_bc e^b_j dx^c + 1/2 (g^{-1} dg/dt e)^a_j dtau

is taken by the Heun predictor-corrector, followed by Gram-Schmidt in the
metric g(x_new, T - tau_new). The increments dW have covariance 2 dtau I.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import rng
from .geometry import DomainError, make_family

GRID_TOL = 1e-9


class IntegrationError(RuntimeError):
    pass


def _quad(g, a, b):
    return np.sum(a * (g @ b[..., None])[..., 0], axis=-1)


def gram_schmidt(e, g):
    """Orthonormalize the columns of e with respect to g (batched)."""
    e = np.array(e, dtype=float)
    n = e.shape[-1]
    for i in range(n):
        for j in range(i):
            ip = _quad(g, e[..., :, i], e[..., :, j])
            e[..., :, i] -= ip[..., None] * e[..., :, j]
        e[..., :, i] /= np.sqrt(_quad(g, e[..., :, i], e[..., :, i]))[..., None]
    return e


def orthonormality_defect(e, g):
    """max |e^T g e - I| per batch entry."""
    q = np.swapaxes(e, -1, -2) @ g @ e
    return np.max(np.abs(q - np.eye(e.shape[-1])), axis=(-2, -1))


def initial_frame(family, chart, x, t):
    x = np.asarray(x, dtype=float)
    eye = np.zeros(x.shape[:-1] + (family.n, family.n))
    eye[...] = np.eye(family.n)
    return gram_schmidt(eye, family.metric(x, t, chart))


@dataclass
class FrameState:
    """A batch (or a single point) of frame-bundle states at backwards time tau."""

    tau: float
    chart: np.ndarray
    x: np.ndarray
    e: np.ndarray
    T: float


def _fields(family, chart, x, e, dW, t):
    dx = (e @ dW[..., None])[..., 0]
    dn = 0.0 if family.zero_christoffel else family.connection_term(x, t, chart, e, dx)
    dd = 0.0 if family.static else family.time_term(x, t, chart, e)
    return dx, dn, dd


def heun_step(family, T, tau, chart, x, e, dW, dtau):
    """One Heun step plus chart switch and Gram-Schmidt.

    Returns (chart, x, e, drift) where drift is the orthonormality defect
    measured before the re-orthonormalization.
    """
    t0, t1 = T - tau, T - (tau + dtau)
    if family.static and family.zero_christoffel:
        x_new = x + (e @ dW[..., None])[..., 0]
        return chart, x_new, e, np.zeros(x.shape[:-1])
    dx1, dn1, dd1 = _fields(family, chart, x, e, dW, t0)
    xp = x + dx1
    ep = e + dn1 + dd1 * dtau
    dx2, dn2, dd2 = _fields(family, chart, xp, ep, dW, t1)
    x_new = x + 0.5 * (dx1 + dx2)
    e_new = e + 0.5 * (dn1 + dn2) + 0.5 * dtau * (dd1 + dd2)
    g_new = family.metric(x_new, t1, chart)
    drift = orthonormality_defect(e_new, g_new)
    sw = family.needs_switch(chart, x_new)
    if np.any(sw):
        chart = np.array(chart, copy=True)
        nc, nx, J = family.transition(chart[sw], x_new[sw])
        chart[sw] = nc
        x_new[sw] = nx
        e_new[sw] = J @ e_new[sw]
        g_new = family.metric(x_new, t1, chart)
    e_new = gram_schmidt(e_new, g_new)
    return chart, x_new, e_new, drift


def sde_step(family, state: FrameState, dW, dtau) -> FrameState:
    """Advance a FrameState by one step of size dtau driven by dW."""
    if dtau <= 0:
        raise ValueError("dtau must be positive")
    chart, x, e, _ = heun_step(
        family, state.T, state.tau, np.asarray(state.chart), np.asarray(state.x, float),
        np.asarray(state.e, float), np.asarray(dW, float), dtau,
    )
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(e))):
        raise FloatingPointError("non-finite state after sde_step")
    if not np.all(family.in_domain(chart, x)):
        raise IntegrationError("state left the atlas")
    return FrameState(tau=state.tau + dtau, chart=chart, x=x, e=e, T=state.T)


@dataclass
class PathRecord:
    """A batch of discretized horizontal Brownian paths on a common time grid.

    Arrays carry a leading path axis B. Grid index k corresponds to backwards
    time tau_k = (k0 + k) dtau and metric time T - tau_k.
    """

    family: object
    T: float
    dtau: float
    k0: int
    chart: np.ndarray  # (B, K+1)
    x: np.ndarray  # (B, K+1, n)
    e: np.ndarray  # (B, K+1, n, n)
    dW: np.ndarray  # (B, K, n)
    drift: np.ndarray  # (B, K)
    seed: int = 0
    ids: list = field(default_factory=list)

    @property
    def n_paths(self):
        return self.x.shape[0]

    @property
    def n_steps(self):
        return self.dW.shape[1]

    @property
    def taus(self):
        return (self.k0 + np.arange(self.n_steps + 1)) * self.dtau

    def time(self, k):
        """Metric time of grid index k (exactly T - tau_k)."""
        return self.T - (self.k0 + k) * self.dtau

    def index(self, tau):
        """Grid index of backwards time tau; off-grid times are refused."""
        k = int(round(tau / self.dtau)) - self.k0
        if abs((k + self.k0) * self.dtau - tau) > GRID_TOL * max(1.0, abs(tau)) or not (
            0 <= k <= self.n_steps
        ):
            raise ValueError(f"tau={tau} is not a grid time of this record")
        return k

    def transport(self, k):
        """P_tau_k = e_0 e_k^{-1}: from (T_{X_k}M, g_{T - tau_k}) to (T_xM, g_T)."""
        return self.e[:, 0] @ np.linalg.inv(self.e[:, k])

    def frame_transport(self, k):
        """e_k^{-1}: chart vectors at X_k to coordinates in the moving frame."""
        return np.linalg.inv(self.e[:, k])

    def subset(self, idx):
        idx = np.atleast_1d(idx)
        return PathRecord(
            self.family, self.T, self.dtau, self.k0, self.chart[idx], self.x[idx], self.e[idx],
            self.dW[idx], self.drift[idx], self.seed, [self.ids[i] for i in idx] if self.ids else [],
        )


def integrate(family, T, dtau, k0, chart, x, e, dW, ids=None):
    """Drive B initial states through the increments dW of shape (B, K, n)."""
    B, K, n = dW.shape
    chart = np.asarray(chart, dtype=int) * np.ones(B, dtype=int)
    X = np.empty((B, K + 1, n))
    E = np.empty((B, K + 1, n, n))
    C = np.empty((B, K + 1), dtype=np.int8)
    D = np.zeros((B, K))
    X[:, 0], E[:, 0], C[:, 0] = x, e, chart
    cx, ce, cc = np.array(x, dtype=float), np.array(e, dtype=float), chart
    for k in range(K):
        cc, cx, ce, D[:, k] = heun_step(family, T, (k0 + k) * dtau, cc, cx, ce, dW[:, k], dtau)
        bad = ~(np.all(np.isfinite(cx), axis=-1) & np.all(np.isfinite(ce), axis=(-2, -1)))
        if np.any(bad):
            i = int(np.flatnonzero(bad)[0])
            label = ids[i] if ids else i
            raise IntegrationError(f"non-finite state on path {label} at step {k}")
        out = ~family.in_domain(cc, cx)
        if np.any(out):
            i = int(np.flatnonzero(out)[0])
            label = ids[i] if ids else i
            raise IntegrationError(f"path {label} left the atlas at step {k}")
        X[:, k + 1], E[:, k + 1], C[:, k + 1] = cx, ce, cc
    return C, X, E, D


def n_steps_for(T, dtau):
    K = int(round(T / dtau))
    if K < 1 or abs(K * dtau - T) > GRID_TOL * max(1.0, T):
        raise ValueError(f"dtau={dtau} does not divide {T}")
    return K


def sample_paths(family, x, T, dtau, seed, path_ids, horizon=None, chart=0, frame=None):
    """Sample the main-stream paths with the given ids from base point (x, T).

    ``horizon`` (default T) is the backwards time up to which paths are
    integrated; it must be a grid time. Because increments are counter-based,
    a shorter horizon yields an exact prefix of the longer path.
    """
    family = make_family(family)
    x = np.asarray(x, dtype=float)
    if not np.all(family.in_domain(chart, x)):
        raise DomainError(f"base point outside chart domain of {family}")
    if T > family.t_max:
        raise DomainError(f"T={T} beyond the lifetime of {family}")
    horizon = T if horizon is None else horizon
    K = n_steps_for(horizon, dtau) if horizon > 0 else 0
    ids = [(rng.MAIN, int(i)) for i in path_ids]
    dW = rng.increments(seed, ids, K, family.n, dtau)
    B = len(ids)
    e0 = initial_frame(family, chart, x, T) if frame is None else np.asarray(frame, float)
    x0 = np.broadcast_to(x, (B, family.n))
    e0 = np.broadcast_to(e0, (B, family.n, family.n))
    C, X, E, D = integrate(family, T, dtau, 0, chart, x0, e0, dW, ids)
    return PathRecord(family, T, dtau, 0, C, X, E, dW, D, seed, ids)


def sample_path(family, x, T, dtau, rng_key, chart=0) -> PathRecord:
    """One path; rng_key = (seed, path index)."""
    seed, idx = rng_key
    return sample_paths(family, x, T, dtau, seed, [idx], chart=chart)


def continuations(record: PathRecord, k, n_inner, seed, outer_ids, horizon):
    """Fresh continuation paths from grid index k of each path in ``record``.

    Returns a PathRecord with B * n_inner paths (path-major) started at
    backwards time tau_k with the recorded frame, integrated to ``horizon``.
    Stream ids are (INNER, outer id, absolute step, inner index).
    """
    fam = record.family
    kabs = record.k0 + k
    steps = int(round(horizon / record.dtau)) - kabs
    ids = [(rng.INNER, *o, kabs, j) for o in outer_ids for j in range(n_inner)]
    dW = rng.increments(seed, ids, max(steps, 0), fam.n, record.dtau)
    x0 = np.repeat(record.x[:, k], n_inner, axis=0)
    e0 = np.repeat(record.e[:, k], n_inner, axis=0)
    c0 = np.repeat(record.chart[:, k], n_inner, axis=0)
    C, X, E, D = integrate(fam, record.T, record.dtau, kabs, c0, x0, e0, dW, ids)
    return PathRecord(fam, record.T, record.dtau, kabs, C, X, E, dW, D, seed, ids)


def splice(record: PathRecord, k, cont: PathRecord) -> PathRecord:
    """Concatenate each frozen prefix [0, k] of ``record`` with its continuations.

    ``cont`` must come from ``continuations(record, k, ...)``; the result has
    cont.n_paths paths indexed from the start of the prefix, with the
    continuation stream ids.
    """
    if record.k0 != 0 or cont.k0 != k:
        raise ValueError("continuations do not start at the prefix end")
    m = cont.n_paths // record.n_paths

    def rep(a, stop):
        return np.repeat(a[:, :stop], m, axis=0)

    C = np.concatenate([rep(record.chart, k), cont.chart], axis=1)
    X = np.concatenate([rep(record.x, k), cont.x], axis=1)
    E = np.concatenate([rep(record.e, k), cont.e], axis=1)
    dW = np.concatenate([rep(record.dW, k), cont.dW], axis=1)
    D = np.concatenate([rep(record.drift, k), cont.drift], axis=1)
    return PathRecord(record.family, record.T, record.dtau, 0, C, X, E, dW, D, cont.seed, cont.ids)


def replay(record: PathRecord) -> PathRecord:
    """Re-drive the integrator with the recorded increments."""
    C, X, E, D = integrate(
        record.family, record.T, record.dtau, record.k0, record.chart[:, 0], record.x[:, 0],
        record.e[:, 0], record.dW, record.ids,
    )
    return PathRecord(record.family, record.T, record.dtau, record.k0, C, X, E, record.dW, D,
                      record.seed, record.ids)


def parallel_transport(record: PathRecord, tau1, tau2):
    """P_{tau1, tau2} = e_{tau2} e_{tau1}^{-1}, mapping T_{X_tau1} to T_{X_tau2}."""
    k1, k2 = record.index(tau1), record.index(tau2)
    if k1 == k2:
        return np.broadcast_to(np.eye(record.family.n), record.e[:, k1].shape).copy()
    return record.e[:, k2] @ np.linalg.inv(record.e[:, k1])


def antidevelopment(record: PathRecord):
    """w_{tau_k}: the cumulative driving increments, shape (B, K+1, n)."""
    w = np.zeros(record.x.shape)
    np.cumsum(record.dW, axis=1, out=w[:, 1:])
    return w


# binary path dump: magic, header length, JSON header, float64 step records

MAGIC = b"RPTH1\n"


def dump_paths(record: PathRecord, fh):
    """Write a record; each step row is (tau, chart, x, e (row-major), dW)."""
    fam = record.family
    header = {
        "family": fam.config(),
        "x": record.x[0, 0].tolist(),
        "T": record.T,
        "dtau": record.dtau,
        "seed": int(record.seed),
        "k0": record.k0,
        "n_paths": record.n_paths,
        "n_steps": record.n_steps,
        "n": fam.n,
        "ids": [list(i) for i in record.ids],
    }
    hb = json.dumps(header, sort_keys=True).encode()
    fh.write(MAGIC)
    fh.write(struct.pack("<I", len(hb)))
    fh.write(hb)
    B, K1, n = record.x.shape
    dW = np.concatenate([record.dW, np.full((B, 1, n), np.nan)], axis=1)
    rows = np.concatenate(
        [
            np.broadcast_to(record.taus[None, :, None], (B, K1, 1)),
            record.chart[..., None].astype(float),
            record.x,
            record.e.reshape(B, K1, n * n),
            dW,
        ],
        axis=-1,
    )
    fh.write(np.ascontiguousarray(rows, dtype="<f8").tobytes())


def load_paths(fh) -> PathRecord:
    if fh.read(len(MAGIC)) != MAGIC:
        raise ValueError("not a path dump")
    (hl,) = struct.unpack("<I", fh.read(4))
    h = json.loads(fh.read(hl).decode())
    n, B, K = h["n"], h["n_paths"], h["n_steps"]
    width = 2 + n + n * n + n
    rows = np.frombuffer(fh.read(), dtype="<f8").reshape(B, K + 1, width)
    fam = make_family(h["family"])
    x = rows[..., 2 : 2 + n].copy()
    e = rows[..., 2 + n : 2 + n + n * n].reshape(B, K + 1, n, n).copy()
    dW = rows[:, :K, 2 + n + n * n :].copy()
    chart = rows[..., 1].astype(np.int8)
    drift = np.full((B, K), np.nan)
    return PathRecord(fam, h["T"], h["dtau"], h["k0"], chart, x, e, dW, drift, h["seed"],
                      [tuple(i) for i in h["ids"]])
