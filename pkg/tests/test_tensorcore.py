import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from tokenseek import tensorcore as tc
from tokenseek.oracle import central_difference, relative_error


def test_matmul_examples():
    b = np.array([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(tc.matmul(np.eye(2), b), b)
    np.testing.assert_array_equal(tc.matmul(np.array([[1.0, 2.0]]), np.array([[3.0], [4.0]])), [[11.0]])
    np.testing.assert_array_equal(tc.matmul(np.zeros((2, 2)), np.ones((2, 5))), np.zeros((2, 5)))


def test_matmul_rejects_bad_shapes_and_nonfinite():
    with pytest.raises(tc.ShapeError):
        tc.matmul(np.ones((2, 3)), np.ones((2, 3)))
    with pytest.raises(tc.NonFiniteError):
        tc.matmul(np.array([[np.inf]]), np.array([[1.0]]))


def test_matmul_transpose_identity():
    rng = np.random.default_rng(0)
    a, b = rng.standard_normal((3, 4)), rng.standard_normal((4, 5))
    np.testing.assert_allclose(tc.matmul(a, b).T, tc.matmul(b.T, a.T), rtol=0, atol=1e-12)


def test_softmax_examples():
    np.testing.assert_allclose(tc.row_softmax_masked(np.zeros((2, 2)), np.ones((2, 2), bool)), [[0.5, 0.5]] * 2)
    causal = np.array([[True, False], [True, True]])
    np.testing.assert_allclose(tc.row_softmax_masked(np.array([[9.0, 7.0], [0.0, 0.0]]), causal),
                               [[1.0, 0.0], [0.5, 0.5]])
    np.testing.assert_allclose(tc.row_softmax_masked(np.array([[math.log(2), 0.0]]), np.ones((1, 2), bool)),
                               [[2 / 3, 1 / 3]], rtol=1e-15)


def test_softmax_rejects_fully_masked_row():
    with pytest.raises(ValueError):
        tc.row_softmax_masked(np.zeros((2, 2)), np.array([[True, False], [False, False]]))


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, (4, 6), elements=st.floats(-50, 50)), st.integers(0, 2**32 - 1))
def test_softmax_rows_sum_to_one(scores, seed):
    allowed = np.random.default_rng(seed).random((4, 6)) < 0.5
    allowed[np.arange(4), np.random.default_rng(seed).integers(0, 6, 4)] = True
    p = tc.row_softmax_masked(scores, allowed)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, rtol=0, atol=1e-12)
    assert np.all(p[~allowed] == 0)


def test_gelu_examples():
    assert tc.gelu(np.array([[0.0]]))[0, 0] == 0.0
    assert abs(tc.gelu(np.array([[10.0]]))[0, 0] - 10.0) < 1e-6
    assert tc.gelu_backward(np.array([[0.0]]), np.array([[1.0]]))[0, 0] == pytest.approx(0.5, abs=1e-15)


def test_stable_log_examples():
    assert abs(tc.stable_log(np.array([1.0]))[0]) < 1e-11
    np.testing.assert_allclose(tc.stable_log(np.array([math.e, math.e**2])), [1.0, 2.0], atol=1e-11)
    assert tc.stable_log(np.array([0.0]))[0] == pytest.approx(math.log(1e-12))


def test_minmax_examples():
    np.testing.assert_allclose(tc.minmax_norm(np.array([1.0, 3.0, 5.0])), [0.0, 0.5, 1.0])
    np.testing.assert_array_equal(tc.minmax_norm(np.array([7.0, 7.0, 7.0])), [0.0, 0.0, 0.0])
    np.testing.assert_allclose(tc.minmax_norm(np.array([-2.0, 0.0])), [0.0, 1.0])


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.integers(2, 20), elements=st.floats(-1e6, 1e6)))
def test_minmax_range(v):
    out = tc.minmax_norm(v)
    assert out.min() >= 0 and out.max() <= 1
    if v.max() - v.min() >= 1e-12:
        assert out.min() == 0 and out.max() == pytest.approx(1.0)


def _check(f, x, analytic):
    fd = central_difference(lambda: f(), x)
    assert relative_error(analytic, fd) <= 1e-6


def test_backward_ops_match_finite_differences():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((3, 4))
    up = rng.standard_normal((3, 4))
    _check(lambda: float((tc.gelu(x) * up).sum()), x, tc.gelu_backward(x, up))

    allowed = np.tril(np.ones((3, 4), bool), 1)
    p = tc.row_softmax_masked(x, allowed)
    _check(lambda: float((tc.row_softmax_masked(x, allowed) * up).sum()), x, tc.softmax_backward(p, up))

    g, b = rng.standard_normal(4), rng.standard_normal(4)
    _, xhat, rstd = tc.layer_norm(x, g, b)
    dx, dg, db = tc.layer_norm_backward(up, xhat, rstd, g)
    _check(lambda: float((tc.layer_norm(x, g, b)[0] * up).sum()), x, dx)
    _check(lambda: float((tc.layer_norm(x, g, b)[0] * up).sum()), g, dg)
    _check(lambda: float((tc.layer_norm(x, g, b)[0] * up).sum()), b, db)

    targets = np.array([1, -1, 3])
    losses, probs = tc.cross_entropy_rows(x, targets)
    _check(lambda: float(tc.cross_entropy_rows(x, targets)[0].sum() / 2), x,
           tc.cross_entropy_backward(probs, targets, 2))


def test_cross_entropy_uniform_is_log_v():
    losses, _ = tc.cross_entropy_rows(np.zeros((2, 259)), np.array([5, 100]))
    np.testing.assert_allclose(losses, math.log(259), rtol=1e-15)
