"""Evolving Riemannian metrics in coordinate charts.

Every family exposes the metric g_ab(x, t), its time derivative, the
Christoffel symbols Gamma^a_bc, and the Ricci tensor, all vectorized over a
leading batch axis of points. Christoffel arrays are indexed as
``gam[..., a, b, c]`` for Gamma^a_{bc}.

Sphere families use two stereographic charts. Chart 0 projects from the north
pole, chart 1 from the south pole; the transition between them is the
inversion x -> x / |x|^2 in both directions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

EPS_CLASSIFY = 1e-6
FD_STEP = 1e-4
SWITCH_RADIUS = 1.5
CHART_RADIUS = 4.0


class DomainError(ValueError):
    pass


class MetricFamily:
    """Base class for a time-dependent metric on a chart atlas."""

    name = "base"
    n = 0
    periodic = False

    def __init__(self, t_max=np.inf):
        self.t_max = t_max

    # subclasses override these five
    def metric(self, x, t, chart=0):
        raise NotImplementedError

    def metric_dt(self, x, t, chart=0):
        raise NotImplementedError

    def christoffel(self, x, t, chart=0):
        raise NotImplementedError

    def ricci(self, x, t, chart=0):
        raise NotImplementedError

    def params(self) -> dict:
        return {}

    def config(self) -> dict:
        return {"family": self.name, **self.params()}

    # chart plumbing, trivial for single-chart families
    n_charts = 1
    zero_christoffel = False
    static = False

    def in_domain(self, chart, x):
        return np.all(np.isfinite(np.asarray(x)), axis=-1)

    def needs_switch(self, chart, x):
        return np.zeros(np.shape(x)[:-1], dtype=bool)

    def transition(self, chart, x):
        """Return (new_chart, new_x, jacobian d new_x / d x)."""
        x = np.asarray(x, dtype=float)
        eye = np.broadcast_to(np.eye(self.n), x.shape + (self.n,)).copy()
        return np.asarray(chart), x.copy(), eye

    def check_time(self, t):
        t = np.asarray(t, dtype=float)
        if np.any(t < -1e-12) or np.any(t > self.t_max):
            raise DomainError(f"time {t} outside [0, {self.t_max}] for {self.name}")

    def check_point(self, chart, x):
        if not np.all(self.in_domain(chart, x)):
            raise DomainError(f"point outside chart domain of {self.name}")

    def connection_term(self, x, t, chart, e, dx):
        """-Gamma^a_bc e^b_j dx^c for a frame e and displacement dx."""
        gam = self.christoffel(x, t, chart)
        return -np.einsum("...abc,...bj,...c->...aj", gam, e, dx)

    def time_term(self, x, t, chart, e):
        """1/2 g^{-1} (dg/dt) e."""
        return 0.5 * np.linalg.solve(self.metric(x, t, chart), self.metric_dt(x, t, chart) @ e)

    def defect_generator(self, x, t, chart=0):
        """(Ric + 1/2 dg/dt) raised with g, as an endomorphism array."""
        g = self.metric(x, t, chart)
        s = self.ricci(x, t, chart) + 0.5 * self.metric_dt(x, t, chart)
        return np.linalg.solve(g, s)

    def __repr__(self):
        p = ", ".join(f"{k}={v}" for k, v in self.params().items())
        return f"{type(self).__name__}({p})"


class FlatTorus(MetricFamily):
    """Static flat torus R^n / (2 pi Z)^n.

    Coordinates are kept unwrapped (the universal cover) so that chart-linear
    functions make sense along paths; periodic functions do not notice.
    """

    name = "flat_torus"
    periodic = True
    zero_christoffel = True
    static = True

    def __init__(self, n=1):
        super().__init__()
        self.n = int(n)

    def params(self):
        return {"n": self.n}

    def scale(self, t):
        return np.ones_like(np.asarray(t, dtype=float))

    def scale_dt(self, t):
        return np.zeros_like(np.asarray(t, dtype=float))

    def _iso(self, x, a):
        x = np.asarray(x, dtype=float)
        out = np.zeros(x.shape[:-1] + (self.n, self.n))
        out[...] = np.eye(self.n)
        return out * np.asarray(a, dtype=float)[..., None, None]

    def metric(self, x, t, chart=0):
        return self._iso(x, self.scale(t))

    def metric_dt(self, x, t, chart=0):
        return self._iso(x, self.scale_dt(t))

    def christoffel(self, x, t, chart=0):
        x = np.asarray(x, dtype=float)
        return np.zeros(x.shape[:-1] + (self.n,) * 3)

    def ricci(self, x, t, chart=0):
        x = np.asarray(x, dtype=float)
        return np.zeros(x.shape[:-1] + (self.n, self.n))

    def heat_time(self, s, T):
        """Integral of 1/scale over [s, T]: the Euclidean heat time."""
        return T - s

    def connection_term(self, x, t, chart, e, dx):
        return np.zeros_like(e)

    def time_term(self, x, t, chart, e):
        return 0.5 * (self.scale_dt(t) / self.scale(t)) * e


class ScaledTorus(FlatTorus):
    """g_t = (1 + lam t) * identity on the flat torus."""

    name = "scaled_torus"
    static = False

    def __init__(self, n=2, lam=0.2):
        super().__init__(n)
        self.lam = float(lam)
        self.t_max = np.inf if lam >= 0 else -1.0 / lam * (1 - 1e-9)

    def params(self):
        return {"n": self.n, "lambda": self.lam}

    def scale(self, t):
        return 1.0 + self.lam * np.asarray(t, dtype=float)

    def scale_dt(self, t):
        return self.lam * np.ones_like(np.asarray(t, dtype=float))

    def heat_time(self, s, T):
        if self.lam == 0:
            return T - s
        return (np.log1p(self.lam * T) - np.log1p(self.lam * s)) / self.lam


def _stereo_factor(x):
    r2 = np.sum(x * x, axis=-1)
    return 4.0 / (1.0 + r2) ** 2


class StaticSphere(MetricFamily):
    """Round 2-sphere of constant scale c0, g = c0 * g_round."""

    name = "static_sphere"
    n = 2
    n_charts = 2
    static = True

    def __init__(self, c0=1.0):
        super().__init__()
        self.c0 = float(c0)

    def params(self):
        return {"c0": self.c0}

    def scale(self, t):
        return self.c0 * np.ones_like(np.asarray(t, dtype=float))

    def scale_dt(self, t):
        return np.zeros_like(np.asarray(t, dtype=float))

    def heat_time(self, s, T):
        return (T - s) / self.c0

    def _conf(self, x, t):
        x = np.asarray(x, dtype=float)
        return x, self.scale(t) * _stereo_factor(x)

    def metric(self, x, t, chart=0):
        x, f = self._conf(x, t)
        return f[..., None, None] * np.eye(2)

    def metric_dt(self, x, t, chart=0):
        x = np.asarray(x, dtype=float)
        f = self.scale_dt(t) * _stereo_factor(x)
        return f[..., None, None] * np.eye(2)

    def christoffel(self, x, t, chart=0):
        # conformal metric e^{2phi} delta with phi = log 2 - log(1+|x|^2) + const
        x = np.asarray(x, dtype=float)
        dphi = -2.0 * x / (1.0 + np.sum(x * x, axis=-1))[..., None]
        eye = np.eye(2)
        gam = (
            np.einsum("ab,...c->...abc", eye, dphi)
            + np.einsum("ac,...b->...abc", eye, dphi)
            - np.einsum("bc,...a->...abc", eye, dphi)
        )
        return gam

    def connection_term(self, x, t, chart, e, dx):
        # Gamma^a_bc e^b dx^c = e^a <dphi, dx> + dx^a <dphi, e> - dphi^a <e, dx>
        dphi = -2.0 * x / (1.0 + np.sum(x * x, axis=-1))[..., None]
        a = np.sum(dphi * dx, axis=-1)
        b = np.sum(dphi[..., :, None] * e, axis=-2)
        c = np.sum(dx[..., :, None] * e, axis=-2)
        return -(
            e * a[..., None, None]
            + dx[..., :, None] * b[..., None, :]
            - dphi[..., :, None] * c[..., None, :]
        )

    def time_term(self, x, t, chart, e):
        return 0.5 * (self.scale_dt(t) / self.scale(t)) * e

    def ricci(self, x, t, chart=0):
        # in two dimensions Ric = K g, and K * c * g_round = g_round
        x = np.asarray(x, dtype=float)
        return _stereo_factor(x)[..., None, None] * np.eye(2)

    def in_domain(self, chart, x):
        x = np.asarray(x, dtype=float)
        return np.all(np.isfinite(x), axis=-1) & (np.linalg.norm(x, axis=-1) < CHART_RADIUS)

    def needs_switch(self, chart, x):
        return np.linalg.norm(np.asarray(x, dtype=float), axis=-1) > SWITCH_RADIUS

    def transition(self, chart, x):
        x = np.asarray(x, dtype=float)
        r2 = np.sum(x * x, axis=-1)
        y = x / r2[..., None]
        jac = (np.eye(2) * r2[..., None, None] - 2.0 * np.einsum("...a,...b->...ab", x, x)) / (
            r2**2
        )[..., None, None]
        return 1 - np.asarray(chart), y, jac

    def to_ambient(self, chart, x):
        """Point on the unit sphere in R^3."""
        x = np.asarray(x, dtype=float)
        chart = np.asarray(chart)
        r2 = np.sum(x * x, axis=-1)
        sign = np.where(chart == 0, 1.0, -1.0)
        p = np.empty(x.shape[:-1] + (3,))
        p[..., :2] = 2.0 * x / (1.0 + r2)[..., None]
        p[..., 2] = sign * (r2 - 1.0) / (1.0 + r2)
        return p

    def ambient_jacobian(self, chart, x):
        """d p / d x, shape (..., 3, 2)."""
        x = np.asarray(x, dtype=float)
        chart = np.asarray(chart)
        r2 = np.sum(x * x, axis=-1)
        d = 1.0 + r2
        sign = np.where(chart == 0, 1.0, -1.0)
        jac = np.empty(x.shape[:-1] + (3, 2))
        jac[..., :2, :] = 2.0 * np.eye(2) / d[..., None, None] - 4.0 * np.einsum(
            "...a,...b->...ab", x, x
        ) / (d**2)[..., None, None]
        jac[..., 2, :] = (sign * 4.0 / d**2)[..., None] * x
        return jac

    def from_ambient(self, p):
        """Chart and coordinates with |x| <= 1 for unit vectors p."""
        p = np.asarray(p, dtype=float)
        chart = (p[..., 2] > 0).astype(int)
        denom = np.where(chart == 0, 1.0 - p[..., 2], 1.0 + p[..., 2])
        return chart, p[..., :2] / denom[..., None]


class ShrinkingSphere(StaticSphere):
    """g_t = (c0 - 2t) g_round, the round Ricci flow on S^2."""

    name = "shrinking_sphere"
    static = False

    def __init__(self, c0=1.0):
        super().__init__(c0)
        self.t_max = 0.5 * c0 * (1 - 1e-9)

    def scale(self, t):
        return self.c0 - 2.0 * np.asarray(t, dtype=float)

    def scale_dt(self, t):
        return -2.0 * np.ones_like(np.asarray(t, dtype=float))

    def heat_time(self, s, T):
        return 0.5 * (np.log(self.c0 - 2.0 * s) - np.log(self.c0 - 2.0 * T))


FAMILIES = {
    "flat_torus": lambda p: FlatTorus(p.get("n", 1)),
    "scaled_torus": lambda p: ScaledTorus(p.get("n", 2), p.get("lambda", 0.2)),
    "shrinking_sphere": lambda p: ShrinkingSphere(p.get("c0", 1.0)),
    "static_sphere": lambda p: StaticSphere(p.get("c0", 1.0)),
}


def make_family(spec) -> MetricFamily:
    """Build a family from a config dict such as {"family": "scaled_torus", "lambda": 0.2}."""
    if isinstance(spec, MetricFamily):
        return spec
    spec = dict(spec)
    name = spec.pop("family", None)
    if name not in FAMILIES:
        raise KeyError(f"unknown family {name!r}; known: {sorted(FAMILIES)}")
    return FAMILIES[name](spec)


@dataclass(frozen=True)
class DefectTensor:
    S: np.ndarray
    eigenvalues: np.ndarray
    tag: str


def classify_eigenvalues(ev, eps=EPS_CLASSIFY) -> str:
    ev = np.asarray(ev)
    if np.all(np.abs(ev) <= eps):
        return "zero"
    if np.all(ev >= -eps):
        return "nonneg"
    if np.all(ev <= eps):
        return "nonpos"
    return "indefinite"


def g_eigenvalues(S, g):
    """Eigenvalues of the form S relative to the inner product g."""
    L = np.linalg.cholesky(g)
    Li = np.linalg.inv(L)
    M = Li @ S @ np.swapaxes(Li, -1, -2)
    return np.linalg.eigvalsh(0.5 * (M + np.swapaxes(M, -1, -2)))


def ricci_flow_defect(family, chart, x, t, eps=EPS_CLASSIFY) -> DefectTensor:
    """S = dg/dt + 2 Ric at a single point, with g-eigenvalues and a sign tag."""
    x = np.asarray(x, dtype=float)
    family.check_point(chart, x)
    family.check_time(t)
    S = family.metric_dt(x, t, chart) + 2.0 * family.ricci(x, t, chart)
    ev = g_eigenvalues(S, family.metric(x, t, chart))
    return DefectTensor(S=S, eigenvalues=ev, tag=classify_eigenvalues(ev, eps))


def covariant_time_derivative(family, Y_field, chart, x, t, dY=None, h=FD_STEP):
    """nabla_t Y = dY/dt + 1/2 g^{-1} (dg/dt) Y at (x, t).

    ``Y_field`` maps t to a vector at x; its t-derivative is either supplied as
    ``dY`` (a callable) or taken by central differences with step h.
    """
    x = np.asarray(x, dtype=float)
    Y = np.asarray(Y_field(t), dtype=float)
    if dY is None:
        dYdt = (np.asarray(Y_field(t + h)) - np.asarray(Y_field(t - h))) / (2 * h)
    else:
        dYdt = np.asarray(dY(t), dtype=float)
    g = family.metric(x, t, chart)
    return dYdt + 0.5 * np.linalg.solve(g, family.metric_dt(x, t, chart) @ Y)


def _geodesic_rhs(family, chart, x, xd, E, t):
    gam = family.christoffel(x, t, chart)
    acc = -np.einsum("...abc,...b,...c->...a", gam, xd, xd)
    dE = None
    if E is not None:
        dE = -np.einsum("...abc,...bj,...c->...aj", gam, E, xd)
    return acc, dE


def exp_map(family, chart, x, v, t, steps=64, transport=None):
    """Geodesic exponential map of g_t by fixed-step RK4 on the geodesic ODE.

    Works on batches (x and v of shape (..., n)). If ``transport`` (shape
    (..., n, k)) is given, those vectors are parallel transported along the
    geodesic and returned as a third value. Sphere geodesics switch charts
    mid-flight when they leave the |x| <= 1.5 region.
    """
    x = np.array(x, dtype=float)
    v = np.array(v, dtype=float)
    chart = np.array(chart, dtype=int) * np.ones(x.shape[:-1], dtype=int)
    E = None if transport is None else np.array(transport, dtype=float)
    if family.zero_christoffel:
        out = (chart, x + v)
        return out if E is None else out + (E,)
    if np.all(v == 0):
        out = (chart, x)
        return out if E is None else out + (E,)
    h = 1.0 / steps
    xd = v
    for _ in range(steps):
        k1x, (k1v, k1E) = xd, _geodesic_rhs(family, chart, x, xd, E, t)
        x2, v2 = x + 0.5 * h * k1x, xd + 0.5 * h * k1v
        E2 = None if E is None else E + 0.5 * h * k1E
        k2x, (k2v, k2E) = v2, _geodesic_rhs(family, chart, x2, v2, E2, t)
        x3, v3 = x + 0.5 * h * k2x, xd + 0.5 * h * k2v
        E3 = None if E is None else E + 0.5 * h * k2E
        k3x, (k3v, k3E) = v3, _geodesic_rhs(family, chart, x3, v3, E3, t)
        x4, v4 = x + h * k3x, xd + h * k3v
        E4 = None if E is None else E + h * k3E
        k4x, (k4v, k4E) = v4, _geodesic_rhs(family, chart, x4, v4, E4, t)
        x = x + h / 6 * (k1x + 2 * k2x + 2 * k3x + k4x)
        xd = xd + h / 6 * (k1v + 2 * k2v + 2 * k3v + k4v)
        if E is not None:
            E = E + h / 6 * (k1E + 2 * k2E + 2 * k3E + k4E)
        sw = family.needs_switch(chart, x)
        if np.any(sw):
            nc, nx, J = family.transition(chart[sw], x[sw])
            xd[sw] = np.einsum("...ab,...b->...a", J, xd[sw])
            if E is not None:
                E[sw] = J @ E[sw]
            chart[sw], x[sw] = nc, nx
        if not np.all(family.in_domain(chart, x)):
            raise DomainError("geodesic left the atlas")
    return (chart, x) if E is None else (chart, x, E)


# finite-difference cross-checks used by tests and by the sanity report


def fd_metric_dt(family, x, t, chart=0, h=FD_STEP):
    return (family.metric(x, t + h, chart) - family.metric(x, t - h, chart)) / (2 * h)


def fd_christoffel(family, x, t, chart=0, h=FD_STEP):
    """Christoffel symbols from central differences of the metric."""
    x = np.asarray(x, dtype=float)
    n = family.n
    dg = np.empty(x.shape[:-1] + (n, n, n))  # dg[..., c, a, b] = d_c g_ab
    for c in range(n):
        dx = np.zeros(n)
        dx[c] = h
        dg[..., c, :, :] = (family.metric(x + dx, t, chart) - family.metric(x - dx, t, chart)) / (2 * h)
    ginv = np.linalg.inv(family.metric(x, t, chart))
    # Gamma_{d b c} = 1/2 (d_b g_dc + d_c g_db - d_d g_bc)
    low = 0.5 * (
        np.einsum("...bdc->...dbc", dg) + np.einsum("...cdb->...dbc", dg) - dg
    )
    return np.einsum("...ad,...dbc->...abc", ginv, low)


def fd_ricci(family, x, t, chart=0, h=FD_STEP):
    """Ricci tensor from central differences of the Christoffel symbols."""
    x = np.asarray(x, dtype=float)
    n = family.n
    dgam = np.empty(x.shape[:-1] + (n, n, n, n))  # dgam[..., e, a, b, c] = d_e Gamma^a_bc
    for e in range(n):
        dx = np.zeros(n)
        dx[e] = h
        dgam[..., e, :, :, :] = (
            family.christoffel(x + dx, t, chart) - family.christoffel(x - dx, t, chart)
        ) / (2 * h)
    gam = family.christoffel(x, t, chart)
    # R_bd = d_a Gam^a_bd - d_d Gam^a_ba + Gam^a_ae Gam^e_bd - Gam^a_de Gam^e_ba
    term1 = np.einsum("...aabd->...bd", dgam)
    term2 = np.einsum("...daba->...bd", dgam)
    term3 = np.einsum("...aae,...ebd->...bd", gam, gam)
    term4 = np.einsum("...ade,...eba->...bd", gam, gam)
    return term1 - term2 + term3 - term4
