import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ricci_paths import rng
from ricci_paths.mc import BATCH, MCEstimate, batches, pooled_stderr, run_batches


def test_rekeyed_increments_match_fresh_generators():
    ids = [(rng.MAIN, i) for i in range(5)] + [(rng.INNER, 3, 7, 1)]
    got = rng.increments(4, ids, 7, 2, 0.01)
    for j, key in enumerate(ids):
        ref = rng.generator(4, *key).standard_normal((7, 2)) * np.sqrt(0.02)
        assert np.array_equal(got[j], ref)


@given(st.integers(0, 2**40), st.lists(st.integers(0, 10**6), min_size=1, max_size=4))
def test_stream_depends_only_on_its_key(seed, key):
    a = rng.increments(seed, [tuple(key)], 3, 2, 1.0)
    b = rng.increments(seed, [(9, 9), tuple(key), (1,)], 3, 2, 1.0)[1]
    assert np.array_equal(a[0], b)


def test_prefix_consistency_across_horizons():
    short = rng.increments(1, [(rng.MAIN, 0)], 5, 3, 0.1)
    long = rng.increments(1, [(rng.MAIN, 0)], 50, 3, 0.1)
    assert np.array_equal(short, long[:, :5])


def test_distinct_streams_and_seeds():
    keys = {tuple(rng.stream_key(0, rng.MAIN, i)) for i in range(1000)}
    keys |= {tuple(rng.stream_key(0, rng.INNER, i)) for i in range(1000)}
    assert len(keys) == 2000
    a = rng.increments(0, [(1, 0)], 4, 1, 1.0)
    b = rng.increments(1, [(1, 0)], 4, 1, 1.0)
    assert not np.array_equal(a, b)


def test_increment_moments():
    dW = rng.increments(3, [(rng.MAIN, i) for i in range(2000)], 10, 2, 0.05).reshape(-1, 2)
    N = dW.shape[0]
    assert np.all(np.abs(dW.mean(axis=0)) < 4 * np.sqrt(0.1 / N))
    cov = np.cov(dW.T)
    assert np.allclose(cov, 0.1 * np.eye(2), atol=4 * 0.1 * np.sqrt(2 / N))


@given(st.integers(0, 5000), st.integers(1, 3000))
def test_batches_partition(n, size):
    bs = batches(n, size)
    flat = [i for b in bs for i in b]
    assert flat == list(range(n))
    assert all(len(b) <= size for b in bs)


def test_default_batch_size():
    assert [len(b) for b in batches(2500)] == [BATCH, BATCH, 2500 - 2 * BATCH]


def _square(r):
    return np.array(r) ** 2


def test_run_batches_ordered_and_job_invariant():
    tasks = batches(10, 3)
    a = run_batches(_square, tasks, jobs=1)
    b = run_batches(_square, tasks, jobs=3)
    for x, y in zip(a, b):
        assert np.array_equal(x, y)
    assert np.concatenate(a).tolist() == [i * i for i in range(10)]


@given(st.lists(st.floats(-1e3, 1e3), min_size=2, max_size=40),
       st.lists(st.floats(-1e3, 1e3), min_size=2, max_size=40))
def test_merge_matches_pooled_samples(a, b):
    m = MCEstimate.from_samples(a).merge(MCEstimate.from_samples(b))
    ref = MCEstimate.from_samples(a + b)
    assert m.n == ref.n
    assert np.isclose(m.mean, ref.mean, atol=1e-9, rtol=1e-9)
    assert np.isclose(m.var, ref.var, atol=1e-6, rtol=1e-7)


def test_vector_estimate_and_serialisation():
    s = np.arange(12.0).reshape(6, 2)
    e = MCEstimate.from_samples(s, seed=3, dtau=0.01)
    assert np.allclose(e.mean, [5, 6])
    assert np.allclose(e.stderr, np.sqrt(np.var(s, axis=0, ddof=1) / 6))
    d = e.to_dict()
    assert d == {"mean": [5.0, 6.0], "stderr": list(np.asarray(e.stderr)), "n": 6, "seed": 3,
                 "dtau": 0.01}
    assert MCEstimate.exact(2.0).stderr == 0.0


def test_pooled_stderr():
    assert pooled_stderr(3.0, 4.0) == pytest.approx(5.0)
    assert pooled_stderr([3.0, 4.0], 0.0) == pytest.approx(5.0)
