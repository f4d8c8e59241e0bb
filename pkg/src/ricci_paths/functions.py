"""Test functions: scalar functions on M, cylinder functions on path space,
vector fields and variation fields.

A cylinder function F = u(X_{s_1}, ..., X_{s_k}) is described by its
evaluation times and by u together with its per-slot differentials. All
evaluations are batched: a slot point is a pair (chart (B,), x (B, n)).
"""

from __future__ import annotations

import numpy as np

from .geometry import FlatTorus, StaticSphere, make_family


# scalar functions on M ---------------------------------------------------


class ScalarFunction:
    kind = "scalar"

    def value(self, family, chart, x):
        raise NotImplementedError

    def differential(self, family, chart, x):
        raise NotImplementedError

    def gradient(self, family, chart, x, t):
        du = self.differential(family, chart, x)
        g = family.metric(x, t, chart)
        return np.linalg.solve(g, du[..., None])[..., 0]

    def grad_norm(self, family, chart, x, t):
        du = self.differential(family, chart, x)
        g = family.metric(x, t, chart)
        return np.sqrt(np.sum(du * np.linalg.solve(g, du[..., None])[..., 0], axis=-1))

    def config(self):
        return {"type": self.kind}


class ConstantScalar(ScalarFunction):
    kind = "const"

    def __init__(self, c=1.0):
        self.c = float(c)

    def value(self, family, chart, x):
        return np.full(np.shape(x)[:-1], self.c)

    def differential(self, family, chart, x):
        return np.zeros(np.shape(x))

    def config(self):
        return {"type": self.kind, "c": self.c}


class TorusMode(ScalarFunction):
    """offset + amp * cos(k . x + phase) on a torus chart."""

    kind = "trig"

    def __init__(self, k, phase=0.0, amp=1.0, offset=0.0):
        self.k = np.atleast_1d(np.asarray(k, dtype=float))
        self.phase, self.amp, self.offset = float(phase), float(amp), float(offset)

    def _arg(self, x):
        return np.asarray(x, dtype=float) @ self.k + self.phase

    def value(self, family, chart, x):
        return self.offset + self.amp * np.cos(self._arg(x))

    def differential(self, family, chart, x):
        return (-self.amp * np.sin(self._arg(x)))[..., None] * self.k

    def config(self):
        return {"type": self.kind, "k": self.k.tolist(), "phase": self.phase, "amp": self.amp,
                "offset": self.offset}


class ChartLinear(ScalarFunction):
    """b . (x - center) in the (unwrapped) torus chart."""

    kind = "linear"

    def __init__(self, b, center):
        self.b = np.asarray(b, dtype=float)
        self.center = np.asarray(center, dtype=float)

    def value(self, family, chart, x):
        return (np.asarray(x, dtype=float) - self.center) @ self.b

    def differential(self, family, chart, x):
        return np.broadcast_to(self.b, np.shape(x)).copy()

    def config(self):
        return {"type": self.kind, "b": self.b.tolist(), "center": self.center.tolist()}


class AmbientLinear(ScalarFunction):
    """offset + a . p for the unit-sphere embedding p of a sphere chart."""

    kind = "ambient_linear"

    def __init__(self, a, offset=0.0):
        self.a = np.asarray(a, dtype=float)
        self.offset = float(offset)

    def value(self, family, chart, x):
        return self.offset + family.to_ambient(chart, x) @ self.a

    def differential(self, family, chart, x):
        return np.einsum("i,...ia->...a", self.a, family.ambient_jacobian(chart, x))

    def config(self):
        return {"type": self.kind, "a": self.a.tolist(), "offset": self.offset}


class AmbientQuadratic(ScalarFunction):
    """offset + p^T Q p on the sphere (degree-2 harmonic part plus constant)."""

    kind = "ambient_quadratic"

    def __init__(self, Q, offset=0.0):
        Q = np.asarray(Q, dtype=float)
        self.Q = 0.5 * (Q + Q.T)
        self.offset = float(offset)

    def value(self, family, chart, x):
        p = family.to_ambient(chart, x)
        return self.offset + np.einsum("...i,ij,...j->...", p, self.Q, p)

    def differential(self, family, chart, x):
        p = family.to_ambient(chart, x)
        J = family.ambient_jacobian(chart, x)
        return 2.0 * np.einsum("...i,ij,...ja->...a", p, self.Q, J)

    def config(self):
        return {"type": self.kind, "Q": self.Q.tolist(), "offset": self.offset}


SCALARS = {
    "const": lambda c: ConstantScalar(c.get("c", 1.0)),
    "trig": lambda c: TorusMode(c["k"], c.get("phase", 0.0), c.get("amp", 1.0), c.get("offset", 0.0)),
    "linear": lambda c: ChartLinear(c["b"], c["center"]),
    "ambient_linear": lambda c: AmbientLinear(c["a"], c.get("offset", 0.0)),
    "ambient_quadratic": lambda c: AmbientQuadratic(c["Q"], c.get("offset", 0.0)),
}


def make_scalar(cfg) -> ScalarFunction:
    if isinstance(cfg, ScalarFunction):
        return cfg
    return SCALARS[cfg["type"]](cfg)


# cylinder functions ------------------------------------------------------


class CylinderFunction:
    """F = u(X_{times[0]}, ..., X_{times[k-1]}) with non-decreasing times."""

    kind = "cylinder"

    def __init__(self, times):
        self.times = tuple(float(s) for s in times)
        if any(b < a for a, b in zip(self.times, self.times[1:])):
            raise ValueError("evaluation times must be non-decreasing")
        if any(s < 0 for s in self.times):
            raise ValueError("evaluation times must be non-negative")

    @property
    def k(self):
        return len(self.times)

    def value(self, family, pts):
        raise NotImplementedError

    def differentials(self, family, pts):
        raise NotImplementedError

    def gradients(self, family, T, pts):
        """grad^(j) u at each slot, taken with g at metric time T - times[j]."""
        out = []
        for (c, x), du, s in zip(pts, self.differentials(family, pts), self.times):
            g = family.metric(x, T - s, c)
            out.append(np.linalg.solve(g, du[..., None])[..., 0])
        return out

    def config(self):
        return {"type": self.kind, "times": list(self.times)}


class ConstantCylinder(CylinderFunction):
    kind = "const"

    def __init__(self, c=1.0):
        super().__init__(())
        self.c = float(c)

    def value(self, family, pts, batch=1):
        return np.full(batch, self.c)

    def differentials(self, family, pts):
        return []

    def config(self):
        return {"type": self.kind, "c": self.c}


class ProductCylinder(CylinderFunction):
    """u = prod_j f_j(y_j)."""

    kind = "product"

    def __init__(self, times, factors):
        super().__init__(times)
        self.factors = [make_scalar(f) for f in factors]
        if len(self.factors) != self.k:
            raise ValueError("one factor per evaluation time")

    def value(self, family, pts):
        v = 1.0
        for f, (c, x) in zip(self.factors, pts):
            v = v * f.value(family, c, x)
        return v

    def differentials(self, family, pts):
        vals = [f.value(family, c, x) for f, (c, x) in zip(self.factors, pts)]
        out = []
        for j, (f, (c, x)) in enumerate(zip(self.factors, pts)):
            others = 1.0
            for i, v in enumerate(vals):
                if i != j:
                    others = others * v
            out.append(np.asarray(others)[..., None] * f.differential(family, c, x))
        return out

    def config(self):
        return {"type": self.kind, "times": list(self.times),
                "factors": [f.config() for f in self.factors]}


class SumCylinder(CylinderFunction):
    """u = sum_j w_j f_j(y_j)."""

    kind = "sum"

    def __init__(self, times, factors, weights=None):
        super().__init__(times)
        self.factors = [make_scalar(f) for f in factors]
        self.weights = [1.0] * self.k if weights is None else [float(w) for w in weights]

    def value(self, family, pts):
        v = 0.0
        for w, f, (c, x) in zip(self.weights, self.factors, pts):
            v = v + w * f.value(family, c, x)
        return v

    def differentials(self, family, pts):
        return [w * f.differential(family, c, x) for w, f, (c, x) in zip(self.weights, self.factors, pts)]

    def config(self):
        return {"type": self.kind, "times": list(self.times), "weights": self.weights,
                "factors": [f.config() for f in self.factors]}


class SquaredCylinder(CylinderFunction):
    """F^2 for a cylinder function F."""

    kind = "square"

    def __init__(self, inner):
        self.inner = make_cylinder(inner)
        super().__init__(self.inner.times)

    def value(self, family, pts):
        return self.inner.value(family, pts) ** 2

    def differentials(self, family, pts):
        v = self.inner.value(family, pts)
        return [2.0 * v[..., None] * d for d in self.inner.differentials(family, pts)]

    def config(self):
        return {"type": self.kind, "inner": self.inner.config()}


def one_point(scalar, s):
    """The 1-point cylinder function u(X_s)."""
    return ProductCylinder((s,), [scalar])


def linear_probe_scalar(family, x, T, v, chart=0):
    """A function l with dl = (g_T v)^flat at x and vanishing Hessian at x.

    Chart-linear on tori; on the sphere the restriction of an ambient-linear
    function whose coefficient vector is tangent at p(x).
    """
    family = make_family(family)
    x = np.asarray(x, dtype=float)
    v = np.asarray(v, dtype=float)
    if isinstance(family, FlatTorus):
        return ChartLinear(family.metric(x, T) @ v, x)
    if isinstance(family, StaticSphere):
        J = family.ambient_jacobian(chart, x)
        return AmbientLinear(family.scale(T) * (J @ v))
    raise TypeError(f"no linear probe for {family}")


def probe_function(family, x, T, v, sigma, weights=(2.0, -1.0), chart=0):
    """The 2-point function u(y1, y2) = w1 l(y1) + w2 l(y2) at times (0, sigma).

    With the default weights grad^(1) u = 2v and grad^(2) u = -v at (x, x).
    """
    ell = linear_probe_scalar(family, x, T, v, chart)
    return SumCylinder((0.0, sigma), [ell, ell], weights)


CYLINDERS = {
    "const": lambda c: ConstantCylinder(c.get("c", 1.0)),
    "product": lambda c: ProductCylinder(c["times"], c["factors"]),
    "sum": lambda c: SumCylinder(c["times"], c["factors"], c.get("weights")),
    "square": lambda c: SquaredCylinder(c["inner"]),
}


def make_cylinder(cfg) -> CylinderFunction:
    if isinstance(cfg, CylinderFunction):
        return cfg
    return CYLINDERS[cfg["type"]](cfg)


# vector fields and potentials for the vector heat equation ----------------


class GradientField:
    """Z = grad_{g_t} f for a scalar f."""

    def __init__(self, scalar):
        self.f = make_scalar(scalar)

    def __call__(self, family, chart, x, t):
        return self.f.gradient(family, chart, x, t)


class CoordinateField:
    """Z = f(x) d/dx^i in chart coordinates."""

    def __init__(self, scalar, component=0):
        self.f = make_scalar(scalar)
        self.component = int(component)

    def __call__(self, family, chart, x, t):
        out = np.zeros(np.shape(x))
        out[..., self.component] = self.f.value(family, chart, x)
        return out


class ConstantField:
    def __init__(self, z):
        self.z = np.asarray(z, dtype=float)

    def __call__(self, family, chart, x, t):
        return np.broadcast_to(self.z, np.shape(x)).copy()


class ScalarPotential:
    """A = a * identity."""

    def __init__(self, a):
        self.a = float(a)

    def __call__(self, family, chart, x, t):
        out = np.zeros(np.shape(x) + (family.n,))
        out[...] = self.a * np.eye(family.n)
        return out


class RicciPotential:
    """A = -(Ric + 1/2 dg/dt) raised with g."""

    def __call__(self, family, chart, x, t):
        return -family.defect_generator(x, t, chart)


class ZeroPotential:
    def __call__(self, family, chart, x, t):
        return np.zeros(np.shape(x) + (family.n,))


# variation fields ---------------------------------------------------------


class VariationField:
    """An H^1 curve v_tau in T_xM (chart coordinates at the base point) with v_0 = 0."""

    def value(self, tau):
        raise NotImplementedError

    def deriv(self, tau):
        raise NotImplementedError


class PolynomialVariation(VariationField):
    """v_tau = (sum_m c_m tau^m) v0, with the constant coefficient forced to zero."""

    def __init__(self, v0, coeffs=(0.0, 1.0)):
        self.v0 = np.asarray(v0, dtype=float)
        c = np.asarray(coeffs, dtype=float).copy()
        c[0] = 0.0
        self.coeffs = c

    def value(self, tau):
        return np.polynomial.polynomial.polyval(tau, self.coeffs) * self.v0

    def deriv(self, tau):
        dc = np.polynomial.polynomial.polyder(self.coeffs)
        return np.polynomial.polynomial.polyval(tau, dc) * self.v0

    def h_norm_sq(self, T, g=None, m=2001):
        """int_0^T |vdot|^2 dtau, in the metric g at the base point (identity if None)."""
        g = np.eye(len(self.v0)) if g is None else np.asarray(g, float)
        tau = np.linspace(0, T, m)
        d = np.array([self.deriv(t) @ g @ self.deriv(t) for t in tau])
        return np.trapezoid(d, tau)

    def config(self):
        return {"type": "polynomial", "v0": self.v0.tolist(), "coeffs": self.coeffs.tolist()}


class StepVariation(VariationField):
    """v_tau = v for tau >= s and 0 before: the field behind the s-parallel gradient."""

    def __init__(self, v, s):
        self.v = np.asarray(v, dtype=float)
        self.s = float(s)

    def value(self, tau):
        return self.v * (tau >= self.s - 1e-12)

    def deriv(self, tau):
        return np.zeros_like(self.v)

    def config(self):
        return {"type": "step", "v": self.v.tolist(), "s": self.s}


VARIATIONS = {
    "polynomial": lambda c: PolynomialVariation(c["v0"], c.get("coeffs", (0.0, 1.0))),
    "step": lambda c: StepVariation(c["v"], c["s"]),
}


def make_variation(cfg) -> VariationField:
    if isinstance(cfg, VariationField):
        return cfg
    return VARIATIONS[cfg["type"]](cfg)
