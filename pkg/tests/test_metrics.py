import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from tacda.metrics import evaluate, rmse, score, score_terms

finite = st.floats(-200, 200)


def test_rmse_exact_prediction():
    assert rmse([5.0, 7.0], [5.0, 7.0]) == 0.0


def test_rmse_worked_example():
    assert abs(rmse([0, 0], [3, 4]) - math.sqrt(12.5)) <= 1e-12


def test_rmse_constant_shift():
    y = np.arange(10.0)
    assert abs(rmse(y, y - 4.5) - 4.5) <= 1e-12


@pytest.mark.parametrize("fn", [rmse, score])
def test_length_mismatch_and_empty(fn):
    with pytest.raises(ValueError, match="length mismatch"):
        fn([1.0, 2.0], [1.0])
    with pytest.raises(ValueError, match="empty"):
        fn([], [])


def test_score_late_and_early_branches():
    assert score([0.0], [0.0]) == 0.0
    assert abs(score([0.0], [13.0]) - (math.exp(1.3) - 1)) <= 1e-9
    assert abs(score([13.0], [0.0]) - (math.e - 1)) <= 1e-9


def test_score_asymmetry_on_random_offsets():
    rng = np.random.default_rng(0)
    for d in rng.uniform(1e-3, 100, size=100):
        assert score([0.0], [d]) > score([0.0], [-d])


@given(st.lists(st.tuples(finite, finite), min_size=1, max_size=30))
def test_score_non_negative_and_zero_only_when_exact(pairs):
    y, p = np.array(pairs).T
    terms = score_terms(y, p)
    assert np.all(terms >= 0)
    assert np.all(terms[y == p] == 0)
    # subnormal residuals may underflow to a zero penalty
    assert np.all(terms[np.abs(y - p) > 1e-300] > 0)


@given(st.lists(st.tuples(finite, finite), min_size=2, max_size=30), st.integers(1, 29))
def test_score_additive_over_splits(pairs, cut):
    y, p = np.array(pairs).T
    cut = min(cut, len(y) - 1)
    assert score(y, p) == pytest.approx(score(y[:cut], p[:cut]) + score(y[cut:], p[cut:]), rel=1e-12)


@given(st.lists(st.tuples(finite, finite), min_size=1, max_size=30), st.randoms())
def test_rmse_permutation_invariant(pairs, rnd):
    shuffled = pairs[:]
    rnd.shuffle(shuffled)
    y, p = np.array(pairs).T
    ys, ps = np.array(shuffled).T
    assert rmse(y, p) == pytest.approx(rmse(ys, ps), rel=1e-12, abs=1e-12)


def test_evaluate_denormalizes_and_records_cap():
    rep = evaluate([0.0, 0.5], [0.1, 0.5], rul_cap=130.0)
    assert rep.rul_cap == 130.0 and rep.n == 2 == len(rep.residuals)
    assert rep.residuals[0] == pytest.approx(13.0)
    assert rep.score == pytest.approx(math.exp(1.3) - 1)
    assert rep.rmse == pytest.approx(13.0 / math.sqrt(2))
