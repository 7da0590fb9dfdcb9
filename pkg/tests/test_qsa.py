import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from speechground.gradcheck import check_qsa
from speechground.numerics import DimensionError
from speechground.qsa import EmptySequenceError, QueryBank, SpeechSequence, qsa_backward, qsa_forward


def _tokens(q, x):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return qsa_forward(QueryBank(np.asarray(q, float)), SpeechSequence(np.asarray(x, float))).tokens


def test_identical_frames_give_that_frame():
    v = np.array([0.3, -1.2, 2.0])
    q = np.random.default_rng(0).normal(size=(4, 3))
    np.testing.assert_allclose(_tokens(q, np.tile(v, (6, 1))), np.tile(v, (4, 1)), rtol=0, atol=1e-15)


def test_single_frame():
    x = np.array([[1.0, 2.0]])
    q = np.random.default_rng(1).normal(size=(3, 2))
    np.testing.assert_array_equal(_tokens(q, x), np.tile(x, (3, 1)))


def test_hand_evaluated_softmax():
    out = _tokens([[1.0]], [[0.0], [1.0]])
    assert out[0, 0] == pytest.approx(np.e / (1 + np.e), abs=1e-12)
    assert out[0, 0] == pytest.approx(0.73106, abs=1e-5)


def test_errors():
    with pytest.raises(DimensionError):
        _tokens(np.ones((2, 3)), np.ones((5, 4)))
    with pytest.raises(EmptySequenceError):
        _tokens(np.ones((2, 3)), np.ones((0, 3)))


def test_warns_when_not_compressing():
    with pytest.warns(UserWarning):
        qsa_forward(QueryBank(np.ones((4, 2))), SpeechSequence(np.ones((3, 2))))


def test_backward_zero_upstream_and_single_frame():
    rng = np.random.default_rng(2)
    bank = QueryBank(rng.normal(size=(2, 3)))
    speech = SpeechSequence(rng.normal(size=(5, 3)))
    dq, dx = qsa_backward(bank, speech, np.zeros((2, 3)))
    assert not dq.any() and not dx.any()
    dq, _ = qsa_backward(bank, SpeechSequence(rng.normal(size=(1, 3))), rng.normal(size=(2, 3)))
    assert not dq.any()


def test_backward_matches_finite_differences():
    report = check_qsa(0)
    assert report.passed, report.max_rel_error


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_permutation_invariance(seed):
    rng = np.random.default_rng(seed)
    q = rng.normal(size=(3, 4))
    x = rng.normal(size=(7, 4))
    perm = rng.permutation(7)
    # a different row order changes the summation order, so compare to a few ulps
    np.testing.assert_allclose(_tokens(q, x[perm]), _tokens(q, x), rtol=1e-13, atol=1e-14)


def test_permutation_invariance_exact_for_reversal_of_two():
    x = np.array([[1.0, 0.0], [0.0, 1.0]])
    q = np.array([[0.3, 0.1]])
    assert np.array_equal(_tokens(q, x[::-1]), _tokens(q, x))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_convexity(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(scale=3, size=(9, 5))
    out = _tokens(rng.normal(scale=2, size=(4, 5)), x)
    assert np.all(out >= x.min(axis=0) - 1e-12)
    assert np.all(out <= x.max(axis=0) + 1e-12)


def test_scale_drives_to_argmax_frame():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(6, 4))
    q = rng.normal(size=(2, 4))
    out = _tokens(1e4 * q, x)
    best = np.argmax(q @ x.T, axis=1)
    np.testing.assert_allclose(out, x[best], atol=1e-6)
