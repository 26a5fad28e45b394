import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from tacda.gradcheck import central_difference, relative_error
from tacda.softdtw import (brute_force_soft_dtw, cost_matrix, hard_dtw, soft_dtw, soft_dtw_batch,
                           soft_dtw_grad, soft_dtw_pairwise, warping_paths)


def series_pairs(max_len=6, max_m=3):
    """Two equally shaped (M, L) series with moderate values."""
    return st.tuples(st.integers(1, max_m), st.integers(1, max_len)).flatmap(
        lambda s: st.tuples(
            arrays(np.float64, s, elements=st.floats(-3, 3)),
            arrays(np.float64, s, elements=st.floats(-3, 3)),
        )
    )


gammas = st.sampled_from([0.01, 0.1, 1.0])


# --- cost matrix -------------------------------------------------------------

def test_cost_matrix_univariate_example():
    np.testing.assert_array_equal(cost_matrix([0, 1], [0, 2]), [[0, 4], [1, 1]])


def test_cost_matrix_sums_over_sensors():
    x = np.array([[1.0], [1.0]])
    y = np.zeros((2, 1))
    assert cost_matrix(x, y)[0, 0] == 2.0


def test_cost_matrix_zero_diagonal_for_identical_series():
    x = np.random.default_rng(0).normal(size=(3, 5))
    assert np.all(np.diag(cost_matrix(x, x)) == 0)


def test_cost_matrix_shape_mismatch():
    with pytest.raises(ValueError, match="shape mismatch"):
        cost_matrix(np.zeros((2, 3)), np.zeros((2, 4)))


# --- value ---------------------------------------------------------------------

def test_single_step_is_squared_distance():
    for gamma in (0.01, 1.0, 10.0):
        assert soft_dtw([2.0], [5.0], gamma).value == pytest.approx(9.0, abs=1e-12)


def test_two_step_identical_series_matches_three_path_sum():
    # paths: diagonal (cost 0) and two paths of cost 1 each
    expected = -0.1 * math.log(1 + 2 * math.exp(-10))
    assert soft_dtw([0.0, 1.0], [0.0, 1.0], 0.1).value == pytest.approx(expected, rel=1e-12)
    assert expected == pytest.approx(-9.08e-6, rel=1e-3)


def test_small_gamma_close_to_hard_dtw():
    rng = np.random.default_rng(1)
    x = np.array([0.0, 1.0, 2.0])
    for _ in range(10):
        y = rng.normal(size=3)
        assert abs(soft_dtw(x, y, 1e-3).value - hard_dtw(x, y)) <= 0.01


def test_r_table_corner_is_value():
    rng = np.random.default_rng(2)
    x, y = rng.normal(size=(2, 5)), rng.normal(size=(2, 5))
    res = soft_dtw(x, y, 0.3)
    assert res.r_table.shape == (5, 5)
    assert res.r_table[-1, -1] == res.value


@pytest.mark.parametrize("bad", [0.0, -1.0])
def test_rejects_non_positive_gamma(bad):
    with pytest.raises(ValueError, match="gamma"):
        soft_dtw([1.0], [2.0], bad)


def test_rejects_non_finite_input():
    with pytest.raises(ValueError, match="non-finite"):
        soft_dtw([np.nan, 1.0], [0.0, 1.0])


def test_large_costs_with_small_gamma_stay_finite():
    x = np.array([[100.0, -100.0, 50.0, 0.0]])
    y = -x
    assert np.isfinite(soft_dtw(x, y, 1e-4).value)
    assert np.all(np.isfinite(soft_dtw_grad(x, y, 1e-4).grad_x))


# --- brute force -----------------------------------------------------------------

@pytest.mark.parametrize("length,count", [(1, 1), (2, 3), (3, 13), (4, 63)])
def test_path_counts_are_central_delannoy_numbers(length, count):
    assert sum(1 for _ in warping_paths(length)) == count


def test_paths_start_end_and_step_rules():
    for path in warping_paths(4):
        assert path[0] == (0, 0) and path[-1] == (3, 3)
        for (a, b), (c, d) in zip(path, path[1:]):
            assert (c - a, d - b) in {(1, 0), (0, 1), (1, 1)}


def test_brute_force_refuses_long_series():
    with pytest.raises(ValueError, match="L <= 8"):
        brute_force_soft_dtw(np.zeros(9), np.zeros(9))


@settings(max_examples=150, deadline=None)
@given(series_pairs(), gammas)
def test_recurrence_matches_path_enumeration(pair, gamma):
    x, y = pair
    assert abs(soft_dtw(x, y, gamma).value - brute_force_soft_dtw(x, y, gamma)) <= 1e-9 * (
        1 + abs(brute_force_soft_dtw(x, y, gamma)))


# --- properties ------------------------------------------------------------------

@settings(max_examples=100, deadline=None)
@given(series_pairs(max_len=8), st.floats(1e-3, 5.0))
def test_soft_dtw_lower_bounds_hard_dtw(pair, gamma):
    x, y = pair
    assert soft_dtw(x, y, gamma).value <= hard_dtw(x, y) + 1e-9


@settings(max_examples=100, deadline=None)
@given(series_pairs(max_len=8), gammas)
def test_symmetry(pair, gamma):
    x, y = pair
    assert soft_dtw(x, y, gamma).value == pytest.approx(soft_dtw(y, x, gamma).value, rel=1e-10, abs=1e-10)


@settings(max_examples=60, deadline=None)
@given(series_pairs(max_len=8), gammas)
def test_self_distance_is_non_positive(pair, gamma):
    x, _ = pair
    # off-diagonal paths may contribute less than one ulp, so only the sign is fixed
    v = soft_dtw(x, x, gamma).value
    if x.shape[1] == 1:
        assert v == 0.0
    else:
        assert v <= 0.0


# --- gradient --------------------------------------------------------------------

def test_single_step_gradient():
    assert soft_dtw_grad([2.0], [5.0], 0.1).grad_x[0, 0] == pytest.approx(-6.0)
    assert soft_dtw_grad([3.0], [3.0], 0.1).grad_x[0, 0] == 0.0


def test_gradient_matches_finite_differences_on_a_random_instance():
    rng = np.random.default_rng(5)
    x, y = rng.normal(size=(2, 5)), rng.normal(size=(2, 5))
    g = soft_dtw_grad(x, y, 0.1).grad_x
    fd = central_difference(lambda z: soft_dtw(z, y, 0.1).value, x, 1e-6)
    assert relative_error(g, fd) <= 1e-5


@settings(max_examples=60, deadline=None)
@given(series_pairs(max_len=7), st.sampled_from([0.1, 1.0]))
def test_alignment_matrix_bounds(pair, gamma):
    x, y = pair
    e = soft_dtw_grad(x, y, gamma).alignment
    length = x.shape[1]
    assert np.all(e >= -1e-12) and np.all(e <= 1 + 1e-12)
    assert length - 1e-9 <= e.sum() <= 2 * length - 1 + 1e-9


# --- batched forms ---------------------------------------------------------------

def test_batch_matches_single_calls():
    rng = np.random.default_rng(6)
    xs, ys = rng.normal(size=(4, 3, 6)), rng.normal(size=(4, 3, 6))
    vals, grads = soft_dtw_batch(xs, ys, 0.2, return_grad=True)
    for i in range(4):
        single = soft_dtw_grad(xs[i], ys[i], 0.2)
        assert vals[i] == pytest.approx(single.value, rel=1e-12)
        np.testing.assert_allclose(grads[i], single.grad_x, rtol=1e-12, atol=1e-14)


def test_pairwise_matches_single_calls():
    rng = np.random.default_rng(7)
    xs, cs = rng.normal(size=(5, 2, 4)), rng.normal(size=(3, 2, 4))
    d = soft_dtw_pairwise(xs, cs, 0.1)
    assert d.shape == (5, 3)
    assert d[2, 1] == pytest.approx(soft_dtw(xs[2], cs[1], 0.1).value, rel=1e-12)
