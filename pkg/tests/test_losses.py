import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from breen import losses as L
from breen import numcore as nc


def test_align_identity_antiparallel_scale():
    v = np.random.default_rng(0).standard_normal((7, 5))
    assert L.align_loss(v, v) == pytest.approx(0, abs=1e-6)
    assert L.align_loss(-v, v) == pytest.approx(2, abs=1e-6)
    assert L.align_loss(5 * v, v) == pytest.approx(0, abs=1e-6)


def test_align_two_rows_brute_force():
    q = np.array([[1.0, 0.0], [0.0, 3.0]])
    v = np.array([[2.0, 0.0], [1.0, 0.0]])
    # per-row cosines 1 and 0 -> mean(1 - cos) = 0.5
    assert L.align_loss(q, v) == pytest.approx(0.5)


def test_align_zero_target_row_rejected():
    with pytest.raises(L.DegenerateTargetError):
        L.align_loss(np.ones((2, 3)), np.array([[1.0, 0, 0], [0, 0, 0]]))


def test_align_zero_output_row_costs_one():
    assert L.align_loss(np.zeros((1, 3)), np.ones((1, 3))) == pytest.approx(1.0)


def test_align_shape_mismatch():
    with pytest.raises(ValueError):
        L.align_loss(np.ones((2, 3)), np.ones((3, 3)))


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10_000), c=st.floats(1e-3, 1e3))
def test_align_bounds_and_scale_invariance(seed, c):
    rng = np.random.default_rng(seed)
    q, v = rng.standard_normal((4, 6)), rng.standard_normal((4, 6))
    a = L.align_loss(q, v)
    assert 0 <= a <= 2
    assert L.align_loss(c * q, v) == pytest.approx(a, abs=1e-6)


def test_align_gradient_matches_finite_differences():
    rng = np.random.default_rng(3)
    v = rng.standard_normal((5, 4))
    err = nc.check_gradients(lambda q: L.align_loss_tensor(q, v), [rng.standard_normal((5, 4))])
    assert err < 1e-4


def test_total_align_is_sum():
    assert L.total_align({3: 0.3, 4: 0.5}) == pytest.approx(0.8)
    assert L.total_align({3: 0.4}) == 0.4
    assert L.total_align({3: 0.25, 4: 0.25}) == 2 * 0.25


def test_lm_uniform_logits_is_log_vocab():
    assert L.lm_loss(np.zeros((3, 64)), np.array([1, 5, -1])) == pytest.approx(math.log(64))


def test_lm_confident_correct_is_zero():
    logits = np.zeros((2, 8))
    logits[0, 3] = logits[1, 1] = 100.0
    assert L.lm_loss(logits, np.array([3, 1])) == pytest.approx(0, abs=1e-6)


def test_lm_against_float64_reference():
    rng = np.random.default_rng(7)
    logits = rng.standard_normal((5, 8))
    labels = np.array([1, -1, 7, 0, 3])
    ref = []
    for row, lab in zip(logits, labels):
        if lab >= 0:
            ref.append(-(row[lab] - math.log(sum(math.exp(x) for x in row))))
    assert L.lm_loss(logits, labels) == pytest.approx(sum(ref) / len(ref), abs=1e-6)


def test_lm_needs_an_active_label():
    with pytest.raises(ValueError):
        L.lm_loss(np.zeros((2, 4)), np.array([-1, -1]))


@pytest.mark.parametrize("alpha,beta", [(1.0, 1.0), (0.5, 1.0), (0.0, 1.0), (2.0, 0.0)])
def test_combined_algebra(alpha, beta):
    br = L.combined(0.8, 2.5, alpha, beta, {3: 0.3, 4: 0.5})
    assert br.total == alpha * 0.8 + beta * 2.5
    assert (br.align_fine, br.align_coarse) == (0.3, 0.5)
    assert br.align_total == pytest.approx(br.align_fine + br.align_coarse)


def test_combined_alpha_zero_is_pure_lm():
    assert L.combined(1.7, 3.25, 0.0, 1.0).total == 3.25


def test_negative_weights_rejected():
    with pytest.raises(ValueError):
        L.combined(1.0, 1.0, -1.0, 1.0)


def test_next_token_view_pairs_shifted_labels():
    logits = nc.tensor(np.arange(2 * 3 * 2, dtype=float).reshape(2, 3, 2))
    flat, labels = L.next_token_view(logits, np.array([[-1, 4, 5], [-1, -1, 6]]))
    assert flat.shape == (4, 2)
    assert labels.tolist() == [4, 5, -1, 6]
    np.testing.assert_array_equal(flat.data[3], logits.data[1, 1])
