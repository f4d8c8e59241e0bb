"""Deterministic reference solvers for the heat equation d_t w = Delta_{g_t} w.

Convention. The generator is the full Laplacian, not Delta / 2. On flat R^n
the kernel of d_t w = Delta w after elapsed time r is the Gaussian with
covariance 2 r I, i.e. (4 pi r)^{-n/2} exp(-|x - y|^2 / (4 r)). This is the
law of x + W_r for a Brownian motion whose increments have covariance
2 dtau I, which is exactly how the path sampler drives its SDE.

For g_t = a(t) delta the Laplacian is a(t)^{-1} times the flat one, so the
evolution is the flat one run for the heat time theta = int_s^T a^{-1} dr.
The same time change holds on the sphere with g_t = c(t) g_round, where
each spherical harmonic of degree l decays by exp(-l(l+1) theta).

Heat-kernel measures nu_(x,T) = H(x,T|., s) dvol_s are represented as
quadrature rules (nodes and weights); integrals against nu are weighted sums.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import integrate, special

from .functions import ConstantScalar, ScalarFunction, make_scalar
from .geometry import FlatTorus, StaticSphere, exp_map, make_family
from .framebundle import initial_frame

TWO_PI = 2.0 * np.pi
RK4_STABILITY = 2.78


# flat-torus kernel ---------------------------------------------------------------


def _theta_1d(d, r):
    """Periodized 1D kernel (4 pi r)^{-1/2} sum_k exp(-(d + 2 pi k)^2 / (4 r))."""
    d = np.mod(np.asarray(d, dtype=float) + np.pi, TWO_PI) - np.pi
    K = int(np.ceil((np.sqrt(4.0 * r * 40.0) + np.pi) / TWO_PI)) + 1
    ks = np.arange(-K, K + 1)
    z = d[..., None] + TWO_PI * ks
    return np.sum(np.exp(-(z * z) / (4.0 * r)), axis=-1) / np.sqrt(4.0 * np.pi * r)


def heat_kernel_flat_torus(n, x, T, y, s):
    """H(x, T | y, s) on the flat torus (R / 2 pi Z)^n for d_t w = Delta w."""
    if not s < T:
        raise ValueError("heat kernel needs s < T")
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    out = 1.0
    for a in range(n):
        out = out * _theta_1d(x[..., a] - y[..., a], T - s)
    return out


def heat_kernel_torus(family, x, T, y, s):
    """Kernel of a conformally scaled flat torus, density w.r.t. dvol_{g_s}."""
    fam = make_family(family)
    theta = fam.heat_time(s, T)
    a_s = float(fam.scale(s))
    return heat_kernel_flat_torus(fam.n, x, theta, y, 0.0) / a_s ** (fam.n / 2)


def circle_cylinder_expectation(family, x, T, times, factors, m=512):
    """E_(x,T) prod_j f_j(X_{s_j}) on a 1D torus family by iterated kernel quadrature.

    Integrates the product of heat kernels H(x,T|y1,T-s1) H(y1,T-s1|y2,T-s2) ...
    against the factors on a periodic trapezoid grid of m points, innermost first.
    The last convolution is evaluated at x itself, so no interpolation is needed.
    """
    fam = make_family(family)
    if not isinstance(fam, FlatTorus) or fam.n != 1:
        raise TypeError("needs a one-dimensional torus family")
    times = [0.0] + [float(t) for t in times]
    if any(b < a for a, b in zip(times, times[1:])):
        raise ValueError("times must be non-decreasing")
    fs = [ConstantScalar(1.0)] + [make_scalar(f) for f in factors]
    y = np.arange(m) * (TWO_PI / m)
    dy = TWO_PI / m
    x0 = float(np.ravel(x)[0])
    w = np.ones(m)
    for j in range(len(times) - 1, 0, -1):
        w = w * fs[j].value(fam, 0, y[:, None])
        theta = fam.heat_time(T - times[j], T - times[j - 1])
        at = np.array([x0]) if j == 1 else y
        if theta > 0:
            w = (_theta_1d(at[:, None] - y[None, :], theta) * dy) @ w
        elif j == 1:
            # slot at the base point: evaluate by the trigonometric interpolant
            c = np.fft.rfft(w) / m
            k = np.arange(len(c))
            wt = np.where((k == 0) | (2 * k == m), 1.0, 2.0)
            w = np.array([np.sum(wt * (c * np.exp(1j * k * x0)).real)])
    return float(w[0])


# grid solver -------------------------------------------------------------------------


@dataclass
class GridSolution:
    axes: list
    values: np.ndarray
    s: float
    T: float
    steps: int
    dt: float

    @property
    def dx(self):
        return TWO_PI / len(self.axes[0])

    def mass(self):
        return float(np.sum(self.values) * self.dx ** len(self.axes))

    def at(self, x):
        """Trigonometric interpolation of the grid values at points x (..., n)."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        c = np.fft.fftn(self.values) / self.values.size
        freqs = [np.fft.fftfreq(len(a), d=1.0 / len(a)) for a in self.axes]
        out = np.zeros(x.shape[0], dtype=complex)
        grids = np.meshgrid(*freqs, indexing="ij")
        for i, xi in enumerate(x):
            phase = sum(g * xi[a] for a, g in enumerate(grids))
            out[i] = np.sum(c * np.exp(1j * phase))
        return out.real


def _grid(n, m):
    ax = np.arange(m) * (TWO_PI / m)
    mesh = np.stack(np.meshgrid(*([ax] * n), indexing="ij"), axis=-1)
    return [ax] * n, mesh


def _laplace_beltrami(family, mesh, w, t, dx):
    """g^{ab} (d_a d_b w - Gamma^c_ab d_c w) with second-order centered differences."""
    n = mesh.shape[-1]
    ginv = np.linalg.inv(family.metric(mesh, t))
    gam = family.christoffel(mesh, t)
    first = [(np.roll(w, -1, a) - np.roll(w, 1, a)) / (2 * dx) for a in range(n)]
    out = np.zeros_like(w)
    for a in range(n):
        for b in range(n):
            if a == b:
                dab = (np.roll(w, -1, a) - 2 * w + np.roll(w, 1, a)) / dx**2
            else:
                dab = (np.roll(first[a], -1, b) - np.roll(first[a], 1, b)) / (2 * dx)
            corr = sum(gam[..., c, a, b] * first[c] for c in range(n))
            out += ginv[..., a, b] * (dab - corr)
    return out


def heat_solve(family, u, s, T, grid=256, dt=None):
    """Method-of-lines solution of the heat equation on a torus family.

    Centered second differences in space, classical RK4 in time. ``u`` is a
    ScalarFunction (or its config) or a callable on grid points (..., n).
    """
    fam = make_family(family)
    if not isinstance(fam, FlatTorus):
        raise TypeError("heat_solve needs a torus family")
    if not s <= T:
        raise ValueError("need s <= T")
    n = fam.n
    axes, mesh = _grid(n, grid)
    dx = TWO_PI / grid
    if isinstance(u, (ScalarFunction, dict)):
        f = make_scalar(u)
        w = f.value(fam, 0, mesh)
    else:
        w = np.asarray(u(mesh), dtype=float)
    ts = np.linspace(s, T, 9)
    ginv_max = max(float(np.max(np.abs(np.linalg.inv(fam.metric(mesh, t))))) for t in ts)
    lam_max = 4.0 * n * ginv_max / dx**2
    span = T - s
    if span == 0:
        return GridSolution(axes, w, s, T, 0, 0.0)
    if dt is None:
        steps = int(np.ceil(span * lam_max / (0.9 * RK4_STABILITY)))
    else:
        if dt * lam_max > RK4_STABILITY:
            raise ValueError(
                f"CFL violation: dt={dt} exceeds the RK4 limit {RK4_STABILITY / lam_max:.3e}; "
                "use a smaller step or a coarser grid"
            )
        steps = int(np.ceil(span / dt - 1e-9))
    h = span / steps
    t = s
    for _ in range(steps):
        k1 = _laplace_beltrami(fam, mesh, w, t, dx)
        k2 = _laplace_beltrami(fam, mesh, w + 0.5 * h * k1, t + 0.5 * h, dx)
        k3 = _laplace_beltrami(fam, mesh, w + 0.5 * h * k2, t + 0.5 * h, dx)
        k4 = _laplace_beltrami(fam, mesh, w + h * k3, t + h, dx)
        w = w + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        t += h
    return GridSolution(axes, w, s, T, steps, h)


# sphere spectral solver ---------------------------------------------------------------


def _as_scale(c):
    if isinstance(c, StaticSphere):
        return c.scale
    if callable(c):
        return c
    c0 = float(c)
    return lambda t: c0 + 0.0 * np.asarray(t, dtype=float)


def sphere_heat_time(c, s, T):
    """int_s^T c(r)^{-1} dr, refusing scale functions that reach zero."""
    if isinstance(c, StaticSphere):
        if c.scale(T) <= 0 or c.scale(s) <= 0:
            raise ValueError("scale function hits zero: singular time")
        return float(c.heat_time(s, T))
    cf = _as_scale(c)
    rs = np.linspace(s, T, 257)
    if np.any(np.asarray(cf(rs)) <= 0):
        raise ValueError("scale function hits zero: singular time")
    val, _ = integrate.quad(lambda r: 1.0 / float(cf(r)), s, T, epsabs=1e-14, epsrel=1e-13)
    return val


def sphere_grid(nlat, nlon):
    """Gauss-Legendre in cos(polar angle) times uniform azimuth on the unit sphere."""
    z, wz = np.polynomial.legendre.leggauss(nlat)
    phi = np.arange(nlon) * (TWO_PI / nlon)
    Z, PHI = np.meshgrid(z, phi, indexing="ij")
    r = np.sqrt(1 - Z**2)
    P = np.stack([r * np.cos(PHI), r * np.sin(PHI), Z], axis=-1).reshape(-1, 3)
    W = np.repeat(wz, nlon) * (TWO_PI / nlon)
    polar = np.arccos(np.clip(Z, -1, 1)).ravel()
    return P, W, polar, PHI.ravel()


@dataclass
class SpectralSolution:
    L: int
    coeffs: dict  # (l, m) -> complex coefficient at time s
    factors: np.ndarray  # exp(-l(l+1) theta) per degree
    theta: float

    def evaluate(self, p):
        """Solution at unit vectors p (..., 3)."""
        p = np.asarray(p, dtype=float)
        polar = np.arccos(np.clip(p[..., 2], -1, 1))
        az = np.arctan2(p[..., 1], p[..., 0])
        out = np.zeros(p.shape[:-1], dtype=complex)
        for (l, m), a in self.coeffs.items():
            out += self.factors[l] * a * special.sph_harm_y(l, m, polar, az)
        return out.real

    def tail(self):
        top = [abs(a) for (l, m), a in self.coeffs.items() if l == self.L]
        return max(top) if top else 0.0


def heat_solve_sphere(c, u, s, T, L=32):
    """Spectral solution on (S^2, c(t) g_round) from data u at time s.

    ``u`` is a callable on unit vectors (..., 3) or a ScalarFunction on a
    sphere family. Each degree-l coefficient is multiplied by exp(-l(l+1) theta).
    """
    theta = sphere_heat_time(c, s, T)
    P, W, polar, az = sphere_grid(2 * L + 2, 4 * L + 4)
    if isinstance(u, (ScalarFunction, dict)):
        f = make_scalar(u)
        fam = c if isinstance(c, StaticSphere) else StaticSphere(1.0)
        ch, xx = fam.from_ambient(P)
        vals = f.value(fam, ch, xx)
    else:
        vals = np.asarray(u(P), dtype=float)
    coeffs = {}
    for l in range(L + 1):
        for m in range(-l, l + 1):
            Y = special.sph_harm_y(l, m, polar, az)
            coeffs[(l, m)] = np.sum(W * vals * np.conj(Y))
    ls = np.arange(L + 1)
    return SpectralSolution(L, coeffs, np.exp(-ls * (ls + 1) * theta), theta)


# heat-kernel measures as quadrature rules ----------------------------------------------


@dataclass
class NuQuadrature:
    """Nodes (chart, x) and weights of nu_(x,T) = H(x,T|y,s) dvol_s(y)."""

    family: object
    chart: np.ndarray
    pts: np.ndarray
    weights: np.ndarray
    s: float
    T: float

    def integrate(self, vals):
        return float(np.sum(self.weights * vals))

    def of(self, f: ScalarFunction):
        return self.integrate(f.value(self.family, self.chart, self.pts))

    def grad_sq(self, f: ScalarFunction):
        return self.integrate(f.grad_norm(self.family, self.chart, self.pts, self.s) ** 2)

    def grad_abs(self, f: ScalarFunction):
        return self.integrate(f.grad_norm(self.family, self.chart, self.pts, self.s))


def _legendre_kernel(cosg, theta, lmax=None):
    """sum_l (2l+1)/(4 pi) P_l(cos g) exp(-l(l+1) theta), by the three-term recurrence."""
    if lmax is None:
        lmax = int(np.ceil(np.sqrt(40.0 / max(theta, 1e-12)))) + 2
    p0 = np.ones_like(cosg)
    p1 = cosg.copy()
    out = p0 / (4 * np.pi) + 3.0 / (4 * np.pi) * p1 * np.exp(-2 * theta)
    for l in range(1, lmax):
        p0, p1 = p1, ((2 * l + 1) * cosg * p1 - l * p0) / (l + 1)
        L = l + 1
        out += (2 * L + 1) / (4 * np.pi) * p1 * np.exp(-L * (L + 1) * theta)
    return out


def heat_measure(family, x, T, s, resolution=None, chart=0):
    """Quadrature rule for nu_(x,T) on a torus (periodic trapezoid) or sphere (GL x azimuth)."""
    fam = make_family(family)
    x = np.asarray(x, dtype=float)
    if isinstance(fam, FlatTorus):
        m = resolution or (512 if fam.n == 1 else 192)
        _, mesh = _grid(fam.n, m)
        pts = mesh.reshape(-1, fam.n)
        dx = TWO_PI / m
        theta = fam.heat_time(s, T)
        w = heat_kernel_flat_torus(fam.n, x, theta, pts, 0.0) * dx**fam.n
        return NuQuadrature(fam, np.zeros(len(pts), dtype=int), pts, w, s, T)
    if isinstance(fam, StaticSphere):
        nlat = resolution or 160
        P, W, _, _ = sphere_grid(nlat, 2 * nlat)
        theta = sphere_heat_time(fam, s, T)
        px = fam.to_ambient(chart, x)
        k = _legendre_kernel(np.clip(P @ px, -1, 1), theta)
        ch, pts = fam.from_ambient(P)
        return NuQuadrature(fam, ch, pts, k * W, s, T)
    raise TypeError(f"no heat measure for {fam}")


def heat_semigroup(family, f, x, T, s, resolution=None, chart=0):
    """(P_{sT} f)(x) = int f dnu_(x,T)."""
    return heat_measure(family, x, T, s, resolution, chart).of(make_scalar(f))


def semigroup_gradient(family, f, x, T, s, h=1e-4, resolution=None, chart=0):
    """grad_{g_T} P_{sT} f at x, in components of the base frame, by central differences."""
    fam = make_family(family)
    x = np.asarray(x, dtype=float)
    e0 = initial_frame(fam, chart, x, T)
    out = np.zeros(fam.n)
    for i in range(fam.n):
        vals = []
        for sgn in (1.0, -1.0):
            c, y = exp_map(fam, chart, x[None], sgn * h * e0[:, i][None], T)
            vals.append(heat_semigroup(fam, f, y[0], T, s, resolution, int(c[0])))
        out[i] = (vals[0] - vals[1]) / (2 * h)
    return out


# supersolution inequalities ---------------------------------------------------------------


@dataclass
class SupersolutionRow:
    check: str
    point: list
    function: dict
    lhs: float
    rhs: float

    @property
    def margin(self):
        return self.rhs - self.lhs

    @property
    def ratio(self):
        return self.lhs / self.rhs if self.rhs != 0 else np.inf if self.lhs > 0 else 0.0

    def to_dict(self):
        return {"check": self.check, "point": self.point, "function": self.function,
                "lhs": self.lhs, "rhs": self.rhs, "margin": self.margin, "ratio": self.ratio}


def supersolution_rows(family, x, T, s, f, resolution=None, chart=0, h=1e-4):
    """Both sides of the four heat-kernel inequalities at one point for one function."""
    fam = make_family(family)
    f = make_scalar(f)
    nu = heat_measure(fam, x, T, s, resolution, chart)
    gP = semigroup_gradient(fam, f, x, T, s, h, resolution, chart)
    gnorm = float(np.linalg.norm(gP))
    vals = f.value(fam, nu.chart, nu.pts)
    grads = f.grad_norm(fam, nu.chart, nu.pts, s)
    span = T - s
    rows = []
    pt = np.asarray(x, float).tolist()
    cfg = f.config()
    rows.append(SupersolutionRow("S2", pt, cfg, gnorm, nu.integrate(grads)))
    rows.append(SupersolutionRow("S3", pt, cfg, gnorm**2, nu.integrate(grads**2)))
    m2 = nu.integrate(vals**2)
    if not np.isfinite(m2) or m2 <= 0:
        raise ValueError("cannot normalize: int u^2 dnu vanishes")
    un = vals / np.sqrt(m2)
    sq = un**2
    ent = nu.integrate(np.where(sq > 0, sq * np.log(np.where(sq > 0, sq, 1.0)), 0.0))
    rows.append(SupersolutionRow("S4", pt, cfg, ent, 4 * span * nu.integrate(grads**2) / m2))
    mean = nu.integrate(vals)
    var = nu.integrate((vals - mean) ** 2)
    rows.append(SupersolutionRow("S5", pt, cfg, var, 2 * span * nu.integrate(grads**2)))
    return rows


def supersolution_checks(family, points, functions, T, s, resolution=None, chart=0):
    """Rows for (S2)-(S5) over all base points and test functions."""
    out = []
    for x in points:
        for f in functions:
            out.extend(supersolution_rows(family, x, T, s, f, resolution, chart))
    return out
