"""Dense float64 primitives with hand-written derivatives.

Every matrix in the package is a plain 2-D ``numpy.ndarray`` of dtype float64.
The functions here are the only numerical building blocks the model, the
ditcher and the scorer use, so each one either has an explicit backward
companion or is not differentiated through.
"""
from __future__ import annotations

import numpy as np

Matrix = np.ndarray

LN_EPS = 1e-5
_GELU_C = np.sqrt(2.0 / np.pi)
_GELU_A = 0.044715


class ShapeError(ValueError):
    """Raised when operand shapes do not agree."""


class NonFiniteError(FloatingPointError):
    """Raised when an operation would emit NaN or Inf."""


def as_matrix(x, *, name: str = "matrix") -> Matrix:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr.reshape(1, -1)
    if arr.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {arr.shape}")
    return arr


def _finite(out: np.ndarray, op: str) -> np.ndarray:
    if not np.isfinite(out).all():
        raise NonFiniteError(f"{op} produced non-finite values")
    return out


def matmul(a: Matrix, b: Matrix) -> Matrix:
    """Matrix product ``a @ b`` with a shape check.

    Summation order is whatever the linked BLAS uses for the given shapes,
    which is fixed for fixed shapes, so repeated calls are bit-identical.
    """
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    return _finite(a @ b, "matmul")


def row_softmax_masked(scores: Matrix, allowed: np.ndarray) -> Matrix:
    """Row-wise softmax over the ``allowed`` entries; disallowed entries are 0."""
    scores = np.asarray(scores, dtype=np.float64)
    allowed = np.asarray(allowed, dtype=bool)
    if scores.shape != allowed.shape:
        try:
            allowed = np.broadcast_to(allowed, scores.shape)
        except ValueError:
            raise ShapeError(f"scores {scores.shape} vs mask {allowed.shape}") from None
    if scores.shape[-1] == 0 or not allowed.any(axis=-1).all():
        raise ValueError("row_softmax_masked: a row has no allowed entries (malformed causal mask)")
    shifted = np.where(allowed, scores, -np.inf)
    shifted = shifted - shifted.max(axis=-1, keepdims=True)
    e = np.where(allowed, np.exp(shifted), 0.0)
    return _finite(e / e.sum(axis=-1, keepdims=True), "row_softmax_masked")


def softmax_backward(probs: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    """Gradient through a (masked) row softmax given its output ``probs``.

    Masked entries have ``probs == 0`` so they receive exactly zero gradient.
    """
    inner = (upstream * probs).sum(axis=-1, keepdims=True)
    return probs * (upstream - inner)


def gelu(x: Matrix) -> Matrix:
    x = np.asarray(x, dtype=np.float64)
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + _GELU_A * x**3)))


def gelu_backward(x: Matrix, upstream: Matrix) -> Matrix:
    x = np.asarray(x, dtype=np.float64)
    t = np.tanh(_GELU_C * (x + _GELU_A * x**3))
    dt = (1.0 - t * t) * _GELU_C * (1.0 + 3.0 * _GELU_A * x * x)
    return upstream * (0.5 * (1.0 + t) + 0.5 * x * dt)


def stable_log(v, eps: float = 1e-12) -> np.ndarray:
    if eps <= 0:
        raise ValueError("eps must be positive")
    return np.log(np.asarray(v, dtype=np.float64) + eps)


def minmax_norm(v, eps: float = 1e-12) -> np.ndarray:
    """Scale to [0, 1]; a range narrower than ``eps`` maps to all zeros."""
    v = np.asarray(v, dtype=np.float64)
    if v.size == 0:
        raise ValueError("minmax_norm needs a nonempty vector")
    lo, hi = v.min(), v.max()
    if hi - lo < eps:
        return np.zeros_like(v)
    return (v - lo) / (hi - lo)


def layer_norm(x: Matrix, gain: np.ndarray, shift: np.ndarray):
    """Row-wise layer normalization.

    Returns ``(out, xhat, rstd)`` where ``xhat`` is the standardized input and
    ``rstd`` the per-row reciprocal standard deviation (shape ``rows x 1``);
    those two are what the backward needs.
    """
    mean = x.mean(axis=-1, keepdims=True)
    centered = x - mean
    var = (centered * centered).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + LN_EPS)
    xhat = centered * rstd
    return xhat * gain + shift, xhat, rstd


def layer_norm_backward(upstream: Matrix, xhat: Matrix, rstd: Matrix, gain: np.ndarray):
    """Returns ``(d_input, d_gain, d_shift)``."""
    d_gain = (upstream * xhat).sum(axis=0)
    d_shift = upstream.sum(axis=0)
    dxhat = upstream * gain
    h = xhat.shape[-1]
    dx = rstd * (dxhat - dxhat.sum(axis=-1, keepdims=True) / h
                 - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True) / h)
    return dx, d_gain, d_shift


def log_softmax_rows(logits: Matrix) -> Matrix:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def cross_entropy_rows(logits: Matrix, targets: np.ndarray):
    """Per-row cross-entropy and softmax probabilities.

    Rows whose target is negative have no target: their loss is 0.
    Returns ``(losses, probs)``.
    """
    logp = log_softmax_rows(logits)
    probs = np.exp(logp)
    targets = np.asarray(targets)
    losses = np.zeros(logits.shape[0])
    has = targets >= 0
    losses[has] = -logp[np.flatnonzero(has), targets[has]]
    return losses, probs


def cross_entropy_backward(probs: Matrix, targets: np.ndarray, denom: float) -> Matrix:
    """d(sum of row losses / denom) / d logits; rows without a target get 0."""
    targets = np.asarray(targets)
    d = probs.copy()
    has = targets >= 0
    d[np.flatnonzero(has), targets[has]] -= 1.0
    d[~has] = 0.0
    return d / denom
