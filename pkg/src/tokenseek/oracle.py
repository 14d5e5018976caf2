"""Reference gradients that do not share code with the hand-written backward.

Two independent routes check the model's backward passes:

* a tiny tape-based reverse-mode autodiff (:class:`Var`) evaluating the same
  network as a straightforward full-row graph, where token ditching is
  expressed by stop-gradients on the unselected rows at every layer
  boundary and on the unselected keys/values;
* central finite differences, either of the ordinary loss or of the
  *ditched* objective in which every unselected-row path is frozen at a
  reference parameter point.
"""
from __future__ import annotations

from collections import OrderedDict
from typing import Callable

import numpy as np

from .model import IGNORE, Parameters, check_inputs

LN_EPS = 1e-5
GELU_C = np.sqrt(2.0 / np.pi)


class Var:
    __slots__ = ("value", "grad", "parents", "backward_fns", "name")

    def __init__(self, value, parents=(), backward_fns=(), name=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.parents = tuple(parents)
        self.backward_fns = tuple(backward_fns)
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return add(self, neg(other))

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return neg(self)

    def backward(self):
        order, seen = [], set()

        def visit(v):
            if id(v) in seen:
                return
            seen.add(id(v))
            for p in v.parents:
                visit(p)
            order.append(v)

        visit(self)
        self.grad = np.ones_like(self.value)
        for v in reversed(order):
            if v.grad is None:
                continue
            for p, fn in zip(v.parents, v.backward_fns):
                g = fn(v.grad)
                p.grad = g if p.grad is None else p.grad + g


def _v(x) -> Var:
    return x if isinstance(x, Var) else Var(x)


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def add(a, b):
    a, b = _v(a), _v(b)
    return Var(a.value + b.value, (a, b),
               (lambda g: _unbroadcast(g, a.shape), lambda g: _unbroadcast(g, b.shape)))


def neg(a):
    a = _v(a)
    return Var(-a.value, (a,), (lambda g: -g,))


def mul(a, b):
    a, b = _v(a), _v(b)
    return Var(a.value * b.value, (a, b),
               (lambda g: _unbroadcast(g * b.value, a.shape), lambda g: _unbroadcast(g * a.value, b.shape)))


def matmul(a, b):
    a, b = _v(a), _v(b)

    def ga(g):
        return _unbroadcast(np.matmul(g, np.swapaxes(b.value, -1, -2)), a.shape)

    def gb(g):
        return _unbroadcast(np.matmul(np.swapaxes(a.value, -1, -2), g), b.shape)

    return Var(np.matmul(a.value, b.value), (a, b), (ga, gb))


def exp(a):
    a = _v(a)
    out = np.exp(a.value)
    return Var(out, (a,), (lambda g: g * out,))


def log(a):
    a = _v(a)
    return Var(np.log(a.value), (a,), (lambda g: g / a.value,))


def tanh(a):
    a = _v(a)
    out = np.tanh(a.value)
    return Var(out, (a,), (lambda g: g * (1.0 - out * out),))


def reciprocal(a):
    a = _v(a)
    return Var(1.0 / a.value, (a,), (lambda g: -g / (a.value * a.value),))


def sqrt(a):
    a = _v(a)
    out = np.sqrt(a.value)
    return Var(out, (a,), (lambda g: g * 0.5 / out,))


def sum_(a, axis=None, keepdims=False):
    a = _v(a)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, a.shape).copy()

    return Var(a.value.sum(axis=axis, keepdims=keepdims), (a,), (back,))


def mean(a, axis, keepdims=True):
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / a.shape[axis])


def reshape(a, shape):
    a = _v(a)
    return Var(a.value.reshape(shape), (a,), (lambda g: g.reshape(a.shape),))


def transpose(a, axes):
    a = _v(a)
    inv = np.argsort(axes)
    return Var(a.value.transpose(axes), (a,), (lambda g: g.transpose(inv),))


def take_rows(a, idx):
    a = _v(a)
    idx = np.asarray(idx, dtype=np.int64)

    def back(g):
        out = np.zeros_like(a.value)
        np.add.at(out, idx, g)
        return out

    return Var(a.value[idx], (a,), (back,))


def pick(a, rows, cols):
    a = _v(a)

    def back(g):
        out = np.zeros_like(a.value)
        np.add.at(out, (rows, cols), g)
        return out

    return Var(a.value[rows, cols], (a,), (back,))


def stop_gradient(a):
    return Var(_v(a).value.copy())


def row_where(flags, a, b):
    """Rows of ``a`` where ``flags`` is true, else rows of ``b``."""
    a, b = _v(a), _v(b)
    f = np.asarray(flags, dtype=bool).reshape((-1,) + (1,) * (a.value.ndim - 1))
    return Var(np.where(f, a.value, b.value), (a, b),
               (lambda g: np.where(f, g, 0.0), lambda g: np.where(f, 0.0, g)))


# ---------------------------------------------------------------------------
# reference network


def _layer_norm(x, g, b):
    mu = mean(x, -1)
    c = x - mu
    var = mean(c * c, -1)
    return c * reciprocal(sqrt(var + LN_EPS)) * g + b


def _gelu(x):
    inner = (x + x * x * x * 0.044715) * GELU_C
    return x * (tanh(inner) + 1.0) * 0.5


def _masked_softmax(s, allowed):
    shift = stop_gradient(Var(np.where(allowed, s.value, -np.inf).max(axis=-1, keepdims=True)))
    e = exp(s - shift) * allowed.astype(np.float64)
    return e * reciprocal(sum_(e, axis=-1, keepdims=True))


def _log_softmax(z):
    shift = stop_gradient(Var(z.value.max(axis=-1, keepdims=True)))
    zs = z - shift
    return zs - log(sum_(exp(zs), axis=-1, keepdims=True))


def _proj(x, P, name, adapters, dropout_key, positions, max_seq):
    w, b = P[name], P[name.rsplit(".", 1)[0] + ".b" + name[-1]]
    out = x @ w + b
    if adapters is not None and name in adapters:
        down, up, ad = adapters[name]
        xin = x
        if dropout_key is not None and ad.dropout_p > 0:
            xin = x * ad.dropout_scale(dropout_key, positions, x.shape[1], max_seq)
        out = out + (xin @ down @ up) * ad.scale
    return out


def build_loss(P, config, tokens, targets, *, site: Callable | None = None,
               adapters=None, dropout_key=None) -> Var:
    """Mean next-token cross-entropy as a :class:`Var` graph over all rows.

    ``P`` maps parameter names to :class:`Var`.  ``site(x)`` is applied at
    every ditching boundary (embeddings, per-layer keys and values, per-layer
    outputs, logits); the identity gives the ordinary loss.
    """
    site = site or (lambda x: x)
    n = len(tokens)
    H, nh = config.hidden, config.n_heads
    dk = H // nh
    pos = np.arange(n)
    allowed = pos[None, :] <= pos[:, None]
    x = take_rows(P["tok_emb"], tokens) + take_rows(P["pos_emb"], pos)
    x = site(x)
    for l in range(config.n_layers):
        pre = f"layers.{l}."
        proj = lambda inp, nm: _proj(inp, P, pre + nm, adapters, dropout_key, pos, config.max_seq)  # noqa: E731
        u = _layer_norm(x, P[pre + "ln1.g"], P[pre + "ln1.b"])
        q, k, v = proj(u, "wq"), proj(u, "wk"), proj(u, "wv")
        k, v = site(k), site(v)
        qh = transpose(reshape(q, (n, nh, dk)), (1, 0, 2))
        kh = transpose(reshape(k, (n, nh, dk)), (1, 2, 0))
        vh = transpose(reshape(v, (n, nh, dk)), (1, 0, 2))
        probs = _masked_softmax((qh @ kh) * (1.0 / np.sqrt(dk)), allowed)
        ctx = reshape(transpose(probs @ vh, (1, 0, 2)), (n, H))
        x = x + proj(ctx, "wo")
        u2 = _layer_norm(x, P[pre + "ln2.g"], P[pre + "ln2.b"])
        x = x + proj(_gelu(proj(u2, "w1")), "w2")
        x = site(x)
    logits = _layer_norm(x, P["lnf.g"], P["lnf.b"]) @ P["head"]
    logits = site(logits)
    targets = np.asarray(targets)
    rows = np.flatnonzero(targets != IGNORE)
    if len(rows) == 0:
        return sum_(logits) * 0.0
    picked = pick(_log_softmax(logits), rows, targets[rows])
    return neg(sum_(picked)) * (1.0 / len(rows))


def _as_vars(params: Parameters):
    return OrderedDict((k, Var(v.copy(), name=k)) for k, v in params.items())


def _adapter_vars(adapters):
    if adapters is None:
        return None
    return {name: (Var(a.down.copy()), Var(a.up.copy()), a) for name, a in adapters.items()}


def reference_gradients(params: Parameters, tokens, targets, selected=None, *,
                        adapters=None, dropout_key=None):
    """Loss and gradients from the autodiff graph.

    With ``selected`` (boolean per token, or a SelectionMask), unselected rows
    are wrapped in stop-gradients at every boundary.  Returns
    ``(loss, param_grads, adapter_grads)``; adapter grads map target name to
    ``(d_down, d_up)``.
    """
    tokens, targets = check_inputs(params.config, tokens, targets)
    P = _as_vars(params)
    A = _adapter_vars(adapters)
    site = None
    if selected is not None:
        flags = selected.as_bool() if hasattr(selected, "as_bool") else np.asarray(selected, dtype=bool)
        site = lambda x: row_where(flags, x, stop_gradient(x))  # noqa: E731
    loss = build_loss(P, params.config, tokens, targets, site=site, adapters=A, dropout_key=dropout_key)
    loss.backward()
    grads = Parameters.zeros(params.config)
    for k, var in P.items():
        if var.grad is not None:
            grads[k] = var.grad
    agrads = None
    if A is not None:
        agrads = {k: (zero_if_none(d.grad, d.value), zero_if_none(u.grad, u.value)) for k, (d, u, _) in A.items()}
    return float(loss.value), grads, agrads


def zero_if_none(g, like):
    return np.zeros_like(like) if g is None else g


def _loss_value(params, tokens, targets, site=None, adapters=None, dropout_key=None):
    P = OrderedDict((k, Var(v)) for k, v in params.items())
    A = None if adapters is None else {k: (Var(a.down), Var(a.up), a) for k, a in adapters.items()}
    return float(build_loss(P, params.config, tokens, targets, site=site, adapters=A,
                            dropout_key=dropout_key).value)


def ditched_objective(params: Parameters, frozen: Parameters, tokens, targets, selected, *,
                      adapters=None, frozen_adapters=None, dropout_key=None) -> float:
    """Loss where selected rows use ``params`` and every unselected path uses ``frozen``.

    The unselected rows' embeddings, keys, values, block outputs and logits
    are taken from a forward at ``frozen``; this is the function whose
    gradient at ``params == frozen`` token ditching computes.
    """
    tokens, targets = check_inputs(params.config, tokens, targets)
    flags = selected.as_bool() if hasattr(selected, "as_bool") else np.asarray(selected, dtype=bool)
    recorded = []
    _loss_value(frozen, tokens, targets, site=lambda x: recorded.append(x.value.copy()) or x,
                adapters=frozen_adapters if frozen_adapters is not None else adapters,
                dropout_key=dropout_key)
    it = iter(recorded)

    def substitute(x):
        return Var(np.where(flags.reshape((-1,) + (1,) * (x.value.ndim - 1)), x.value, next(it)))

    return _loss_value(params, tokens, targets, site=substitute, adapters=adapters, dropout_key=dropout_key)


# ---------------------------------------------------------------------------
# finite differences


def relative_error(a, b, floor: float = 1e-8) -> float:
    """``|a - b| / max(|a|, |b|, floor)`` in the Euclidean norm.

    The floor only matters for gradients that are structurally zero (for
    example key biases, to which a row softmax is invariant).
    """
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    den = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return float(np.linalg.norm(a - b) / den)


def central_difference(f: Callable[[], float], arr: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Finite-difference gradient of ``f()`` w.r.t. ``arr``, perturbed in place."""
    out = np.zeros_like(arr)
    for idx in np.ndindex(arr.shape):
        old = arr[idx]
        arr[idx] = old + step
        fp = f()
        arr[idx] = old - step
        fm = f()
        arr[idx] = old
        out[idx] = (fp - fm) / (2 * step)
    return out


def fd_param_grads(loss_fn: Callable[[Parameters], float], params: Parameters, step: float = 1e-5,
                   names=None) -> Parameters:
    """Central differences of ``loss_fn(params)`` for every (or the named) parameter tensor."""
    probe = params.copy()
    out = Parameters.zeros(params.config)
    for name in names or list(probe):
        out[name] = central_difference(lambda: loss_fn(probe), probe[name], step)
    return out


def flat_relative_error(a, b) -> float:
    """Relative error of two gradient collections (mappings name -> array) as one concatenated vector."""
    keys = list(a.keys()) if hasattr(a, "keys") else list(a)
    va = np.concatenate([np.ravel(a[k]) for k in keys])
    vb = np.concatenate([np.ravel(b[k]) for k in keys])
    return relative_error(va, vb)
