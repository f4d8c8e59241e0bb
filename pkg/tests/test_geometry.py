import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ricci_paths.geometry import (
    DomainError,
    FlatTorus,
    ScaledTorus,
    ShrinkingSphere,
    StaticSphere,
    classify_eigenvalues,
    covariant_time_derivative,
    exp_map,
    fd_christoffel,
    fd_metric_dt,
    fd_ricci,
    make_family,
    ricci_flow_defect,
)

FAMILIES = [FlatTorus(1), FlatTorus(2), ScaledTorus(2, 0.2), ScaledTorus(2, -0.2),
            StaticSphere(1.0), ShrinkingSphere(1.0)]

coord = st.floats(-1.2, 1.2)
times = st.floats(0.0, 0.4)


def great_circle(p, q):
    return np.arccos(np.clip(p @ q, -1, 1))


@pytest.mark.parametrize("fam", FAMILIES, ids=repr)
def test_metric_positive_and_christoffel_symmetric(fam, rng):
    x = rng.uniform(-1, 1, (20, fam.n))
    for t in (0.0, 0.3):
        g = fam.metric(x, t)
        assert np.all(np.linalg.eigvalsh(g) > 0)
        gam = fam.christoffel(x, t)
        assert np.allclose(gam, np.swapaxes(gam, -1, -2), atol=1e-14)


@pytest.mark.parametrize("fam", FAMILIES, ids=repr)
def test_metric_dt_matches_finite_difference(fam, rng):
    x = rng.uniform(-1, 1, (10, fam.n))
    t = 0.2
    assert np.max(np.abs(fd_metric_dt(fam, x, t) - fam.metric_dt(x, t))) < 1e-6


@pytest.mark.parametrize("fam", FAMILIES, ids=repr)
def test_christoffel_and_ricci_match_finite_differences(fam, rng):
    x = rng.uniform(-1, 1, (10, fam.n))
    t = 0.1
    assert np.max(np.abs(fd_christoffel(fam, x, t) - fam.christoffel(x, t))) < 1e-6
    assert np.max(np.abs(fd_ricci(fam, x, t) - fam.ricci(x, t))) < 1e-6


def test_sphere_ricci_from_metric_only(rng):
    # Ricci from finite differences of finite-difference Christoffels: independent of closed forms
    fam = ShrinkingSphere(1.0)
    x = rng.uniform(-1, 1, (5, 2))

    class FDOnly:
        n = 2

        def christoffel(self, y, t, chart=0):
            return fd_christoffel(fam, y, t, chart, h=1e-3)

    ric = fd_ricci(FDOnly(), x, 0.2, h=1e-3)
    assert np.max(np.abs(ric - fam.ricci(x, 0.2))) < 1e-5


@given(coord, coord)
def test_sphere_transition_roundtrip_and_metric(a, b):
    fam = ShrinkingSphere(1.0)
    x = np.array([a, b])
    if np.linalg.norm(x) < 0.2:
        x = x + 0.3
    c, y, J = fam.transition(0, x)
    c2, z, J2 = fam.transition(c, y)
    assert c2 == 0
    assert np.allclose(z, x, atol=1e-10)
    assert np.allclose(J2 @ J, np.eye(2), atol=1e-10)
    assert np.isfinite(np.linalg.cond(J))
    g0 = fam.metric(x, 0.2, 0)
    g1 = fam.metric(y, 0.2, c)
    Jinv = np.linalg.inv(J)
    assert np.allclose(Jinv.T @ g0 @ Jinv, g1, atol=1e-10)
    # both charts describe the same point of the sphere
    assert np.allclose(fam.to_ambient(0, x), fam.to_ambient(c, y), atol=1e-12)


@given(coord, coord, times)
def test_defect_eigenvalues_chart_invariant(a, b, t):
    fam = ScaledTorus(2, 0.3)
    sph = ShrinkingSphere(1.0)
    x = np.array([a, b])
    if np.linalg.norm(x) < 0.3:  # keep to the overlap of the two charts
        x = x + 0.3
    c, y, _ = sph.transition(0, x)
    e0 = ricci_flow_defect(sph, 0, x, t).eigenvalues
    e1 = ricci_flow_defect(sph, int(c), y, t).eigenvalues
    assert np.allclose(e0, e1, atol=1e-8)
    assert ricci_flow_defect(fam, 0, x, t).tag == "nonneg"


def test_defect_examples():
    d = ricci_flow_defect(FlatTorus(2), 0, np.array([0.1, 2.0]), 0.3)
    assert np.all(d.S == 0) and d.tag == "zero"
    d = ricci_flow_defect(ScaledTorus(2, 0.2), 0, np.array([0.1, 2.0]), 0.3)
    assert np.allclose(d.S, 0.2 * np.eye(2)) and d.tag == "nonneg"
    d = ricci_flow_defect(ScaledTorus(2, -0.2), 0, np.array([0.1, 2.0]), 0.3)
    assert d.tag == "nonpos"
    rng = np.random.default_rng(1)
    for x in rng.uniform(-1.4, 1.4, (20, 2)):
        for t in (0.0, 0.2, 0.45):
            d = ricci_flow_defect(ShrinkingSphere(1.0), 0, x, t)
            assert np.linalg.norm(d.S) <= 1e-8 and d.tag == "zero"


def test_defect_domain_errors():
    with pytest.raises(DomainError):
        ricci_flow_defect(ShrinkingSphere(1.0), 0, np.array([5.0, 0.0]), 0.1)
    with pytest.raises(DomainError):
        ricci_flow_defect(ShrinkingSphere(1.0), 0, np.array([0.1, 0.0]), 0.6)


def test_classify_eigenvalues():
    assert classify_eigenvalues([0, 1e-7]) == "zero"
    assert classify_eigenvalues([0, 0.1]) == "nonneg"
    assert classify_eigenvalues([-0.1, 0]) == "nonpos"
    assert classify_eigenvalues([-0.1, 0.1]) == "indefinite"


def test_covariant_time_derivative_examples():
    x = np.array([0.4, 1.0])
    assert np.allclose(covariant_time_derivative(FlatTorus(2), lambda t: np.array([1.0, 2.0]), 0, x, 0.3), 0)
    lam, t = 0.3, 0.25
    Y = np.array([0.7, -0.2])
    got = covariant_time_derivative(ScaledTorus(2, lam), lambda s: Y, 0, x, t)
    # hand computation: 1/2 g^{-1} dg/dt Y with g = (1 + lam t) I
    assert np.allclose(got, lam / (2 * (1 + lam * t)) * Y, atol=1e-12)


@pytest.mark.parametrize("fam", [ScaledTorus(2, 0.4), ShrinkingSphere(1.0)], ids=repr)
def test_covariant_time_derivative_metric_compatible(fam):
    x = np.array([0.3, -0.5])
    w = np.array([0.6, 0.8])

    def unit(t):
        return w / np.sqrt(w @ fam.metric(x, t) @ w)

    Y = unit(0.2)
    nY = covariant_time_derivative(fam, unit, 0, x, 0.2)
    assert abs(Y @ fam.metric(x, 0.2) @ nY) < 1e-6  # O(h^2) with h = 1e-4


def test_exp_map_examples():
    ch, y = exp_map(FlatTorus(2), 0, np.array([[6.2, 0.0]]), np.array([[0.3, 0.0]]), 0.0)
    assert np.allclose(np.mod(y, 2 * np.pi), np.mod([[6.5, 0.0]], 2 * np.pi))
    fam = ShrinkingSphere(1.0)
    x = np.array([[0.3, 0.2]])
    ch, y = exp_map(fam, 0, x, np.zeros((1, 2)), 0.1)
    assert np.array_equal(y, x)


@given(st.floats(0.05, 1.2), st.floats(0, 2 * np.pi), st.floats(0.0, 0.4))
def test_exp_map_sphere_geodesic_distance(r, ang, t):
    fam = ShrinkingSphere(1.0)
    x = np.array([0.4, -0.3])
    d = np.array([np.cos(ang), np.sin(ang)])
    d = d / np.sqrt(d @ fam.metric(x, t) @ d)
    ch, y = exp_map(fam, 0, x[None], (r * d)[None], t, steps=128)
    p, q = fam.to_ambient(0, x), fam.to_ambient(ch[0], y[0])
    # distance on the sphere of radius sqrt(c(t))
    assert abs(np.sqrt(fam.scale(t)) * great_circle(p, q) - r) < 1e-8


def test_exp_map_transport_is_isometry():
    fam = ShrinkingSphere(1.0)
    x = np.array([[1.2, 0.4]])
    g = fam.metric(x[0], 0.1)
    E = np.linalg.cholesky(np.linalg.inv(g))[None]
    ch, y, E2 = exp_map(fam, 0, x, np.array([[0.8, 0.3]]), 0.1, transport=E)
    g2 = fam.metric(y[0], 0.1, ch[0])
    assert np.allclose(E2[0].T @ g2 @ E2[0], np.eye(2), atol=1e-7)


def test_make_family_registry():
    f = make_family({"family": "scaled_torus", "n": 2, "lambda": 0.2})
    assert isinstance(f, ScaledTorus) and f.lam == 0.2
    assert make_family(f.config()).config() == f.config()
    with pytest.raises(KeyError):
        make_family({"family": "klein_bottle"})
