import itertools
import math
import statistics

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from quota.numeric import matmul, matmul_t, median_pairwise_cosine, percentile, softmax_with_temperature

finite = st.floats(min_value=-1e6, max_value=1e6, allow_nan=False)


@pytest.mark.parametrize(
    "values, p, expected",
    [
        ([1, 2, 3, 4, 5], 50, 3.0),
        ([0, 10], 10, 1.0),
        ([7], 90, 7.0),
        ([3, 1, 2], 0, 1.0),
        ([3, 1, 2], 100, 3.0),
    ],
)
def test_percentile_examples(values, p, expected):
    assert percentile(values, p) == pytest.approx(expected, abs=1e-12)


def test_percentile_empty():
    with pytest.raises(ValueError, match="empty sample"):
        percentile([], 50)


@given(st.lists(finite, min_size=1, max_size=40), st.floats(0, 100))
def test_percentile_matches_numpy_linear(values, p):
    assert percentile(values, p) == pytest.approx(np.percentile(values, p), rel=1e-9, abs=1e-6)


@given(st.lists(finite, min_size=1, max_size=30), st.floats(0, 100), st.floats(0, 100), st.randoms())
def test_percentile_monotone_and_permutation_invariant(values, p1, p2, rnd):
    lo, hi = sorted((p1, p2))
    assert percentile(values, lo) <= percentile(values, hi)
    shuffled = list(values)
    rnd.shuffle(shuffled)
    assert percentile(shuffled, hi) == percentile(values, hi)


def test_softmax_examples():
    np.testing.assert_allclose(softmax_with_temperature([0, 0, 0], 1), [1 / 3] * 3, atol=1e-15)
    np.testing.assert_allclose(softmax_with_temperature([1, 0], 1), [0.73105857863000488, 0.26894142136999512],
                               atol=1e-15)
    p = softmax_with_temperature([1, 0], 0.01)
    assert p[0] == 1.0 and p[1] < 1e-40


@pytest.mark.parametrize("tau", [0, -1.0])
def test_softmax_rejects_bad_temperature(tau):
    with pytest.raises(ValueError, match="invalid temperature"):
        softmax_with_temperature([1, 2], tau)


@given(st.lists(st.floats(-50, 50), min_size=1, max_size=20), st.floats(0.05, 10), st.floats(-100, 100))
def test_softmax_sums_to_one_and_shift_invariant(logits, tau, shift):
    p = softmax_with_temperature(logits, tau)
    assert np.all(p >= 0)
    assert abs(p.sum() - 1) <= 1e-9
    np.testing.assert_allclose(softmax_with_temperature(np.add(logits, shift), tau), p, atol=1e-9)


def _brute_median_cosine(rows):
    sims = []
    for a, b in itertools.combinations(rows, 2):
        dot = sum(x * y for x, y in zip(a, b))
        sims.append(dot / (math.sqrt(sum(x * x for x in a)) * math.sqrt(sum(y * y for y in b))))
    return statistics.median(sims)


def test_median_pairwise_cosine_examples(rng):
    assert median_pairwise_cosine([[1.0, 2.0], [1.0, 2.0]]) == pytest.approx(1.0)
    assert median_pairwise_cosine([[1.0, 0.0], [0.0, 1.0]]) == pytest.approx(0.0)
    rows = rng.standard_normal((4, 5))
    assert median_pairwise_cosine(rows) == pytest.approx(_brute_median_cosine(rows.tolist()), abs=1e-12)


def test_median_pairwise_cosine_degenerate():
    with pytest.raises(ValueError, match="degenerate token"):
        median_pairwise_cosine([[0.0, 0.0], [1.0, 1.0]])


def test_median_pairwise_cosine_rescaling(rng):
    rows = rng.standard_normal((6, 4))
    scales = rng.uniform(0.1, 10, size=(6, 1))
    assert median_pairwise_cosine(rows * scales) == pytest.approx(median_pairwise_cosine(rows), abs=1e-12)


def test_matmul_matches_reference(rng):
    a, b = rng.standard_normal((5, 7)), rng.standard_normal((7, 3))
    np.testing.assert_allclose(matmul(a, b), a @ b, atol=1e-12)
    np.testing.assert_allclose(matmul_t(a, b.T), a @ b, atol=1e-12)
    with pytest.raises(ValueError):
        matmul(a, a)
