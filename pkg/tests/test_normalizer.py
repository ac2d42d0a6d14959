import numpy as np
from hypothesis import given, settings, strategies as st

from patchmgn.normalizer import VARIANCE_FLOOR, Normalizer, update_normalizer


def test_streaming_matches_batch_statistics():
    rng = np.random.default_rng(0)
    x = rng.normal(loc=1e3, scale=[1.0, 50.0], size=(1_000_000, 2))
    stats = Normalizer.empty(2, freeze_after=10**9)
    for chunk in np.array_split(x, 137):
        stats = update_normalizer(stats, chunk)
    ref_mean = np.mean(x, axis=0, dtype=np.float64)
    ref_var = np.var(x, axis=0, dtype=np.float64)
    np.testing.assert_allclose(stats.mean, ref_mean, rtol=1e-12)
    np.testing.assert_allclose(stats.variance, ref_var, rtol=1e-12)
    assert stats.count == 1_000_000


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 40))
def test_order_stability(seed, pieces):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(400, 3)) * 10.0 ** rng.integers(-3, 4)
    chunks = np.array_split(x, pieces)
    fwd, rev = Normalizer.empty(3), Normalizer.empty(3)
    for c in chunks:
        fwd = update_normalizer(fwd, c)
    for c in chunks[::-1]:
        rev = update_normalizer(rev, c)
    np.testing.assert_allclose(fwd.mean, rev.mean, rtol=1e-12, atol=1e-12 * np.abs(x).max())
    np.testing.assert_allclose(fwd.m2, rev.m2, rtol=1e-12)


def test_freezes_after_configured_updates():
    stats = Normalizer.empty(1, freeze_after=2)
    stats = update_normalizer(stats, [[1.0]])
    stats = update_normalizer(stats, [[3.0]])
    assert stats.frozen
    assert update_normalizer(stats, [[100.0]]) is stats
    assert stats.mean.tolist() == [2.0]


def test_variance_floor():
    stats = update_normalizer(Normalizer.empty(2), np.ones((5, 2)))
    assert np.all(stats.variance == VARIANCE_FLOOR)
    assert np.all(Normalizer.empty(2).std == 1.0)
