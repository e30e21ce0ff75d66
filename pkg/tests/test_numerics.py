import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from difftpt.checks import brute_fraction_threshold
from difftpt.errors import EmptyInput, NonPositiveTemperature, ZeroNorm
from difftpt.numerics import (Direction, cosine_similarity, cosine_softmax, fraction_threshold,
                              l2_normalize, selection_count, shannon_entropy)

finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)


def test_l2_normalize_examples():
    np.testing.assert_allclose(l2_normalize([3, 4]), [0.6, 0.8], atol=1e-15)
    np.testing.assert_array_equal(l2_normalize([1, 0, 0]), [1, 0, 0])
    with pytest.raises(ZeroNorm):
        l2_normalize([0, 0])


@given(arrays(np.float64, st.integers(1, 30), elements=finite))
def test_l2_normalize_idempotent(v):
    if np.linalg.norm(v) <= 1e-12:
        return
    n = l2_normalize(v)
    assert abs(np.linalg.norm(n) - 1) <= 1e-12
    np.testing.assert_allclose(l2_normalize(n), n, atol=1e-12, rtol=0)


def test_cosine_similarity_examples():
    assert cosine_similarity([2, 0], [2, 0]) == 1.0
    assert cosine_similarity([1, 0], [0, 1]) == 0.0
    # 1/sqrt(2), frozen from a 30-digit evaluation
    assert cosine_similarity([1, 1], [1, 0]) == pytest.approx(0.707106781186547524, abs=1e-15)
    with pytest.raises(ZeroNorm):
        cosine_similarity([0, 0], [1, 0])


@given(arrays(np.float64, 5, elements=finite), arrays(np.float64, 5, elements=finite))
def test_cosine_similarity_bounded(a, b):
    if min(np.linalg.norm(a), np.linalg.norm(b)) <= 1e-6:
        return
    assert -1.0 <= cosine_similarity(a, b) <= 1.0


def test_cosine_softmax_examples():
    np.testing.assert_allclose(cosine_softmax([0.5, 0.5], 1.0), [0.5, 0.5])
    np.testing.assert_allclose(cosine_softmax([1, 0], 1.0), [0.731058578630004879, 0.268941421369995121],
                               atol=1e-15)
    assert abs(cosine_softmax([1, 0], 0.01)[0] - 1) <= 1e-9
    with pytest.raises(NonPositiveTemperature):
        cosine_softmax([1, 0], 0.0)


def test_cosine_softmax_no_overflow_at_low_temperature():
    p = cosine_softmax([1.0, -1.0, 0.99], 1e-4)
    assert np.all(np.isfinite(p)) and abs(p.sum() - 1) < 1e-12


@given(arrays(np.float64, st.integers(2, 12), elements=st.floats(-1, 1)),
       st.floats(0.01, 2.0), st.floats(-100, 100))
def test_cosine_softmax_shift_invariant(s, tau, c):
    np.testing.assert_allclose(cosine_softmax(s, tau), cosine_softmax(s + c, tau), atol=1e-9)


def test_shannon_entropy_examples():
    assert shannon_entropy(np.full(4, 0.25)) == pytest.approx(1.38629436111989061, abs=1e-14)
    assert shannon_entropy([0, 1, 0]) == 0.0
    assert shannon_entropy([0.8, 0.2]) == pytest.approx(0.500402423538187880, abs=1e-14)


@settings(max_examples=200)
@given(st.integers(2, 30), st.integers(0, 2**32 - 1))
def test_entropy_maximized_by_uniform(K, seed):
    rng = np.random.default_rng(seed)
    q = np.abs(np.full(K, 1.0 / K) + rng.normal(0, 0.05 / K, K))
    q /= q.sum()
    assert shannon_entropy(q) <= math.log(K) + 1e-12
    assert shannon_entropy(q) >= 0


def test_fraction_threshold_examples():
    keep = fraction_threshold([0.1, 0.9, 0.5, 0.3], 0.5, Direction.KEEP_LOWEST)
    assert np.flatnonzero(keep).tolist() == [0, 3]
    assert fraction_threshold([5.0, 1.0, 3.0], 1.0, Direction.KEEP_HIGHEST).all()
    keep = fraction_threshold([0.2, 0.2, 0.2], 0.34, Direction.KEEP_HIGHEST)
    assert np.flatnonzero(keep).tolist() == [0, 1]
    with pytest.raises(EmptyInput):
        fraction_threshold([], 0.5, Direction.KEEP_LOWEST)


def test_selection_count_uses_ceiling():
    assert selection_count(128, 0.3) == 39
    assert selection_count(10, 0.3) == 3
    assert selection_count(3, 0.34) == 2
    assert selection_count(5, 1e-6) == 1


def test_fraction_threshold_matches_sort_oracle():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        n = int(rng.integers(1, 257))
        vals = rng.integers(0, 5, n).astype(float) if rng.random() < 0.3 else rng.standard_normal(n)
        frac = float(rng.uniform(0.001, 1.0))
        d = Direction.KEEP_LOWEST if rng.random() < 0.5 else Direction.KEEP_HIGHEST
        keep = fraction_threshold(vals, frac, d)
        assert keep.tolist() == brute_fraction_threshold(vals, frac, d)
        assert keep.sum() == math.ceil(round(frac * n, 9))


@given(arrays(np.float64, st.integers(1, 60), elements=finite), st.floats(0.01, 1.0), st.floats(0.01, 1.0))
def test_fraction_threshold_monotone(vals, f1, f2):
    lo, hi = sorted((f1, f2))
    for d in Direction:
        small = fraction_threshold(vals, lo, d)
        big = fraction_threshold(vals, hi, d)
        assert not np.any(small & ~big)
