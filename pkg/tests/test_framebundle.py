import io

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ricci_paths import framebundle as fb
from ricci_paths import rng
from ricci_paths.geometry import DomainError, FlatTorus, ScaledTorus, ShrinkingSphere, StaticSphere
from ricci_paths.mc import run_batches


def test_sde_step_flat_torus_is_translation():
    fam = FlatTorus(2)
    e = np.eye(2)
    st_ = fb.FrameState(0.0, 0, np.array([6.2, 1.0]), e, 1.0)
    dW = np.array([0.3, -0.1])
    out = fb.sde_step(fam, st_, dW, 0.01)
    assert np.allclose(np.mod(out.x, 2 * np.pi), np.mod(st_.x + dW, 2 * np.pi))
    assert np.array_equal(out.e, e)
    assert out.tau == 0.01


@pytest.mark.parametrize("fam", [ScaledTorus(2, 0.4), ShrinkingSphere(1.0)], ids=repr)
def test_sde_step_zero_noise_is_pure_time_lift(fam):
    x = np.array([0.3, 0.2])
    T, dtau = 0.3, 0.01
    e = fb.initial_frame(fam, 0, x, T)
    out = fb.sde_step(fam, fb.FrameState(0.0, 0, x, e, T), np.zeros(2), dtau)
    assert np.array_equal(out.x, x)
    g = fam.metric(x, T - dtau)
    assert np.allclose(out.e.T @ g @ out.e, np.eye(2), atol=1e-12)
    # both families rescale the metric by a scalar in time, so the frame rescales exactly
    rho = fam.metric(x, T - dtau)[0, 0] / fam.metric(x, T)[0, 0]
    assert np.allclose(out.e, e / np.sqrt(rho), atol=1e-12)


def test_scaled_torus_frame_follows_closed_form():
    lam, T, dtau = 0.4, 0.5, 0.01
    fam = ScaledTorus(2, lam)
    rec = fb.sample_paths(fam, [0.1, 0.2], T, dtau, 3, range(4))
    for k in range(rec.n_steps + 1):
        tau = k * dtau
        # solution of e' = 1/2 lam / (1 + lam (T - tau)) e with e(0) = (1 + lam T)^{-1/2}
        expect = (1 + lam * (T - tau)) ** -0.5 * np.eye(2)
        assert np.allclose(rec.e[:, k], expect, atol=1e-12)


def test_flat_paths_match_antidevelopment_and_transport_is_identity():
    rec = fb.sample_paths(FlatTorus(2), [0.5, 1.0], 0.3, 0.01, 7, range(5))
    w = fb.antidevelopment(rec)
    assert np.allclose(rec.x - rec.x[:, :1], w, atol=1e-12)
    for tau in (0.0, 0.1, 0.3):
        assert np.allclose(fb.parallel_transport(rec, 0.0, tau), np.eye(2))


def test_time_coordinate_and_single_step():
    rec = fb.sample_paths(ShrinkingSphere(1.0), [0.1, 0.1], 0.2, 0.2, 0, range(3))
    assert rec.n_steps == 1
    rec = fb.sample_paths(ShrinkingSphere(1.0), [0.1, 0.1], 0.2, 0.01, 0, range(3))
    for k in range(rec.n_steps + 1):
        assert rec.time(k) == 0.2 - k * 0.01


def test_sampling_errors():
    with pytest.raises(ValueError):
        fb.sample_paths(FlatTorus(1), [0.0], 0.5, 0.3, 0, range(2))
    with pytest.raises(DomainError):
        fb.sample_paths(ShrinkingSphere(1.0), [9.0, 0.0], 0.2, 0.01, 0, range(2))
    with pytest.raises(DomainError):
        fb.sample_paths(ShrinkingSphere(1.0), [0.0, 0.0], 0.6, 0.01, 0, range(2))
    rec = fb.sample_paths(FlatTorus(1), [0.0], 0.5, 0.01, 0, range(2))
    with pytest.raises(ValueError):
        fb.parallel_transport(rec, 0.0, 0.015)
    with pytest.raises(ValueError):
        fb.sde_step(FlatTorus(1), fb.FrameState(0, 0, np.zeros(1), np.eye(1), 1.0), np.zeros(1), 0.0)


def test_shrinking_sphere_antidevelopment_second_moment():
    # oracle: direct simulation of the scaled R^n Brownian motion with an unrelated generator
    T, N, n = 0.2, 10000, 2
    rec = fb.sample_paths(ShrinkingSphere(1.0), [0.2, -0.1], T, 0.02, 11, range(N))
    w2 = np.sum(fb.antidevelopment(rec)[:, -1] ** 2, axis=1)
    ref = np.random.default_rng(99).normal(0, np.sqrt(2 * T), (N, n))
    r2 = np.sum(ref**2, axis=1)
    se = np.sqrt(w2.var() / N + r2.var() / N)
    assert abs(w2.mean() - r2.mean()) <= 3 * se
    assert abs(w2.mean() - 2 * n * T) <= 3 * np.sqrt(w2.var() / N)


def test_increment_variance():
    dW = rng.increments(5, [(1, i) for i in range(200)], 100, 2, 1e-3)
    v = dW.var()
    assert abs(v - 2e-3) < 3 * 2e-3 * np.sqrt(2 / dW.size)


@given(st.floats(0.0, 0.2), st.floats(0.0, 0.2))
def test_parallel_transport_isometry_and_composition(t1, t2):
    rec = _sphere_record()
    k1, k2 = round(t1 / rec.dtau), round(t2 / rec.dtau)
    a, b = k1 * rec.dtau, k2 * rec.dtau
    P0a = fb.parallel_transport(rec, 0.0, a)
    Pab = fb.parallel_transport(rec, a, b)
    P0b = fb.parallel_transport(rec, 0.0, b)
    assert np.allclose(Pab @ P0a, P0b, atol=1e-10)
    # |P v| in g at the later time equals |v| in g_T
    v = np.array([0.3, -0.7])
    Pv = (P0b @ v)[..., :]
    gT = rec.family.metric(rec.x[:, 0], rec.T, rec.chart[:, 0])
    gb = rec.family.metric(rec.x[:, k2], rec.time(k2), rec.chart[:, k2])
    n0 = np.einsum("a,pab,b->p", v, gT, v)
    nb = np.einsum("pa,pab,pb->p", Pv, gb, Pv)
    assert np.allclose(n0, nb, atol=1e-10)


_CACHE = {}


def _sphere_record():
    if "rec" not in _CACHE:
        _CACHE["rec"] = fb.sample_paths(ShrinkingSphere(1.0), [1.3, 0.2], 0.2, 0.005, 1, range(6))
    return _CACHE["rec"]


def test_sphere_paths_switch_charts_and_stay_orthonormal():
    rec = fb.sample_paths(ShrinkingSphere(1.0), [1.45, 0.0], 0.2, 0.005, 1, range(64))
    assert np.any(rec.chart == 1)
    for k in (0, 10, rec.n_steps):
        g = rec.family.metric(rec.x[:, k], rec.time(k), rec.chart[:, k])
        assert np.max(fb.orthonormality_defect(rec.e[:, k], g)) < 1e-12


def test_replay_is_bit_exact():
    rec = fb.sample_paths(ShrinkingSphere(1.0), [1.4, 0.3], 0.2, 0.005, 5, range(8))
    rep = fb.replay(rec)
    assert np.array_equal(rec.x, rep.x)
    assert np.array_equal(rec.e, rep.e)
    assert np.array_equal(rec.chart, rep.chart)
    # the antidevelopment increments are the driving increments
    assert np.allclose(np.diff(fb.antidevelopment(rec), axis=1), rec.dW, atol=1e-14)


def test_zero_increments_give_zero_antidevelopment():
    fam = StaticSphere(1.0)
    x = np.array([[0.2, 0.1]])
    e = fb.initial_frame(fam, 0, x, 1.0)
    C, X, E, D = fb.integrate(fam, 1.0, 0.1, 0, 0, x, e, np.zeros((1, 5, 2)))
    assert np.allclose(X, x[:, None])


def test_determinism_across_layouts_and_workers():
    fam = ShrinkingSphere(1.0)
    full = fb.sample_paths(fam, [0.3, 0.2], 0.1, 0.01, 9, range(10))
    part = fb.sample_paths(fam, [0.3, 0.2], 0.1, 0.01, 9, [7, 3])
    assert np.array_equal(full.x[[7, 3]], part.x)
    ser = run_batches(_sample, [range(0, 4), range(4, 8)], jobs=1)
    par = run_batches(_sample, [range(0, 4), range(4, 8)], jobs=2)
    for a, b in zip(ser, par):
        assert np.array_equal(a, b)


def _sample(ids):
    return fb.sample_paths(ShrinkingSphere(1.0), [0.3, 0.2], 0.1, 0.01, 9, ids).x


def test_shorter_horizon_is_exact_prefix():
    fam = ShrinkingSphere(1.0)
    a = fb.sample_paths(fam, [0.3, 0.2], 0.2, 0.01, 2, range(3))
    b = fb.sample_paths(fam, [0.3, 0.2], 0.2, 0.01, 2, range(3), horizon=0.1)
    assert np.array_equal(a.x[:, : b.n_steps + 1], b.x)


def test_dump_load_roundtrip():
    rec = fb.sample_paths(ShrinkingSphere(1.0), [1.4, 0.3], 0.1, 0.01, 5, range(3))
    buf = io.BytesIO()
    fb.dump_paths(rec, buf)
    buf.seek(0)
    back = fb.load_paths(buf)
    assert np.array_equal(back.x, rec.x) and np.array_equal(back.e, rec.e)
    assert np.array_equal(back.dW, rec.dW) and np.array_equal(back.chart, rec.chart)
    assert back.ids == rec.ids and back.T == rec.T
    with pytest.raises(ValueError):
        fb.load_paths(io.BytesIO(b"garbage"))


def test_continuations_and_splice_share_prefix():
    fam = ShrinkingSphere(1.0)
    rec = fb.sample_paths(fam, [0.3, 0.2], 0.2, 0.01, 2, range(2))
    cont = fb.continuations(rec, 5, 3, 2, rec.ids, 0.15)
    assert cont.n_paths == 6 and cont.k0 == 5
    comp = fb.splice(rec, 5, cont)
    assert comp.n_steps == 15
    assert np.array_equal(comp.x[:3, :6], np.repeat(rec.x[:1, :6], 3, axis=0))
    assert np.array_equal(comp.x[:, 5], np.repeat(rec.x[:, 5], 3, axis=0))


def drift_constants(levels=(1e-2, 1e-3, 1e-4), paths=64, T=0.2):
    """C(dtau) = max over steps and paths of the pre-correction defect, divided by dtau."""
    out = []
    for dt in levels:
        rec = fb.sample_paths(ShrinkingSphere(1.0), [0.3, 0.2], T, dt, 0, range(paths))
        out.append(rec.drift.max() / dt)
    return np.array(out)


@pytest.mark.slow
def test_orthonormality_drift_scales_linearly():
    C = drift_constants()
    ratios = C[:-1] / C[1:]
    assert np.all((ratios >= 0.5) & (ratios <= 2.0)), (C, ratios)
