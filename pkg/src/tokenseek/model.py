"""Decoder-only transformer with an explicit backward pass.

The forward engine operates on two row groups: a *gradient* group whose
intermediate tensors are cached for backward, and a *constant* group whose
rows are computed with identical arithmetic but never cached (only their
keys and values are kept, as plain values, because gradient-group queries
read them).  A plain full forward is the special case of an empty constant
group.
"""
from __future__ import annotations

import hashlib
import io
import struct
from collections import OrderedDict
from dataclasses import dataclass, fields
from typing import Iterator

import numpy as np

from . import tensorcore as tc

IGNORE = -1

# cached tensor kind -> accounting category
KIND_CATEGORY = {
    "ln1_xhat": "hidden",
    "ln1_rstd": "norm",
    "ln1_out": "hidden",
    "q": "qkv",
    "k": "qkv",
    "v": "qkv",
    "k_value": "kv_value",
    "v_value": "kv_value",
    "attn": "attention",
    "ctx": "hidden",
    "ln2_xhat": "hidden",
    "ln2_rstd": "norm",
    "ln2_out": "hidden",
    "ff_pre": "ff_pre",
    "ff_hidden": "hidden",
    "lnf_xhat": "hidden",
    "lnf_rstd": "norm",
    "lnf_out": "hidden",
    "probs": "hidden",
}
CATEGORIES = ("attention", "qkv", "ff_pre", "hidden", "norm", "kv_value", "adapter")
HEAD_LAYER = -1

LAYER_PARAMS = ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo",
                "ln1.g", "ln1.b", "ln2.g", "ln2.b", "w1", "b1", "w2", "b2")
PROJECTIONS = {"wq": "bq", "wk": "bk", "wv": "bv", "wo": "bo", "w1": "b1", "w2": "b2"}


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 2
    hidden: int = 16
    n_heads: int = 2
    ff_dim: int = 32
    vocab: int = 259
    max_seq: int = 64
    seed: int = 0

    def __post_init__(self):
        for f in ("n_layers", "hidden", "n_heads", "ff_dim", "vocab", "max_seq"):
            if int(getattr(self, f)) < 1:
                raise ValueError(f"{f} must be >= 1")
        if self.max_seq < 2:
            raise ValueError("max_seq must be >= 2")
        if self.hidden % self.n_heads:
            raise ValueError(f"hidden={self.hidden} is not divisible by n_heads={self.n_heads}")

    @property
    def head_dim(self) -> int:
        return self.hidden // self.n_heads

    def as_tuple(self) -> tuple:
        return tuple(int(getattr(self, f.name)) for f in fields(self))


def param_shapes(config: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Parameter names and shapes in declaration (checkpoint) order."""
    H, F, V, S = config.hidden, config.ff_dim, config.vocab, config.max_seq
    shapes = [("tok_emb", (V, H)), ("pos_emb", (S, H))]
    per_layer = {
        "wq": (H, H), "bq": (H,), "wk": (H, H), "bk": (H,), "wv": (H, H), "bv": (H,),
        "wo": (H, H), "bo": (H,), "ln1.g": (H,), "ln1.b": (H,), "ln2.g": (H,), "ln2.b": (H,),
        "w1": (H, F), "b1": (F,), "w2": (F, H), "b2": (H,),
    }
    for l in range(config.n_layers):
        shapes += [(f"layers.{l}.{k}", per_layer[k]) for k in LAYER_PARAMS]
    shapes += [("lnf.g", (H,)), ("lnf.b", (H,)), ("head", (H, V))]
    return shapes


def parameter_count(config: ModelConfig) -> int:
    return sum(int(np.prod(s)) for _, s in param_shapes(config))


class Parameters:
    """Named float64 tensors in declaration order; also used for gradients."""

    def __init__(self, config: ModelConfig, tensors: "OrderedDict[str, np.ndarray]"):
        expected = param_shapes(config)
        if [n for n, _ in expected] != list(tensors):
            raise ValueError("parameter names do not match the config")
        for name, shape in expected:
            if tensors[name].shape != shape:
                raise ValueError(f"{name}: shape {tensors[name].shape} != {shape}")
        self.config = config
        self.tensors = tensors

    @classmethod
    def zeros(cls, config: ModelConfig) -> "Parameters":
        return cls(config, OrderedDict((n, np.zeros(s)) for n, s in param_shapes(config)))

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def __setitem__(self, name: str, value: np.ndarray) -> None:
        if value.shape != self.tensors[name].shape:
            raise ValueError(f"{name}: shape {value.shape} != {self.tensors[name].shape}")
        self.tensors[name] = value

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def items(self):
        return self.tensors.items()

    def layer(self, l: int) -> dict[str, np.ndarray]:
        prefix = f"layers.{l}."
        return {k: self.tensors[prefix + k] for k in LAYER_PARAMS}

    def copy(self) -> "Parameters":
        return Parameters(self.config, OrderedDict((k, v.copy()) for k, v in self.tensors.items()))

    def count(self) -> int:
        return sum(v.size for v in self.tensors.values())

    def flat(self) -> np.ndarray:
        return np.concatenate([v.ravel() for v in self.tensors.values()])

    def checksum(self) -> str:
        return hashlib.sha256(checkpoint_bytes(self)).hexdigest()

    def max_abs_diff(self, other: "Parameters") -> float:
        return max(float(np.max(np.abs(a - other[k]), initial=0.0)) for k, a in self.items())


Gradients = Parameters


def init_params(config: ModelConfig, init_scale: float = 0.02) -> Parameters:
    if init_scale < 0:
        raise ValueError("init_scale must be positive")
    rng = np.random.default_rng(config.seed)
    out = OrderedDict()
    for name, shape in param_shapes(config):
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "g":
            out[name] = np.ones(shape)
        elif len(shape) == 1:
            out[name] = np.zeros(shape)
        else:
            # always draw so init_scale=0 consumes the same stream
            out[name] = rng.standard_normal(shape) * init_scale
    return Parameters(config, out)


class ActivationCache:
    """Tensors retained for backward, keyed by ``(layer, kind)``.

    The head (final normalization + logits) uses ``layer == HEAD_LAYER``.
    ``scalars`` is maintained incrementally on every ``put``.
    """

    def __init__(self, config: ModelConfig, tokens, targets, sel_rows, const_rows):
        self.config = config
        self.tokens = np.asarray(tokens, dtype=np.int64)
        self.targets = np.asarray(targets, dtype=np.int64)
        self.n = len(self.tokens)
        self.sel_rows = np.asarray(sel_rows, dtype=np.int64)
        self.const_rows = np.asarray(const_rows, dtype=np.int64)
        self.first_layer = 0
        self.entries: dict[tuple[int, str], np.ndarray] = {}
        self.scalars = 0

    def put(self, layer: int, kind: str, value: np.ndarray) -> None:
        if kind not in KIND_CATEGORY and not kind.startswith("adapter."):
            raise KeyError(f"unknown cache kind {kind!r}")
        old = self.entries.get((layer, kind))
        if old is not None:
            self.scalars -= old.size
        self.entries[(layer, kind)] = value
        self.scalars += value.size

    def get(self, layer: int, kind: str) -> np.ndarray:
        return self.entries[(layer, kind)]

    def has(self, layer: int, kind: str) -> bool:
        return (layer, kind) in self.entries

    def total_scalars(self) -> int:
        return int(sum(v.size for v in self.entries.values()))

    def by_category(self) -> dict[str, int]:
        out = dict.fromkeys(CATEGORIES, 0)
        for (_, kind), v in self.entries.items():
            cat = "adapter" if kind.startswith("adapter.") else KIND_CATEGORY[kind]
            out[cat] += v.size
        return out

    def describe(self) -> list[tuple[str, int, int, int]]:
        """(kind, layer, rows, cols) per entry; attention maps report heads*rows."""
        rows = []
        for (layer, kind), v in sorted(self.entries.items()):
            r = v.size // v.shape[-1] if v.ndim else 1
            rows.append((kind, layer, r, v.shape[-1]))
        return rows


def next_token_targets(tokens) -> np.ndarray:
    """Targets for causal LM training: token i predicts token i+1; last has none."""
    tokens = np.asarray(tokens, dtype=np.int64)
    out = np.full(len(tokens), IGNORE, dtype=np.int64)
    out[:-1] = tokens[1:]
    return out


def check_inputs(config: ModelConfig, tokens, targets) -> tuple[np.ndarray, np.ndarray]:
    tokens = np.asarray(tokens, dtype=np.int64)
    targets = np.asarray(targets, dtype=np.int64)
    n = len(tokens)
    if tokens.ndim != 1 or n < 1:
        raise ValueError("tokens must be a nonempty 1-D sequence")
    if n > config.max_seq:
        raise ValueError(f"sequence length {n} exceeds max_seq={config.max_seq}")
    if targets.shape != tokens.shape:
        raise ValueError(f"targets length {len(targets)} != tokens length {n}")
    if tokens.min() < 0 or tokens.max() >= config.vocab:
        raise ValueError(f"token ids must lie in [0, {config.vocab})")
    if targets.max() >= config.vocab or targets.min() < IGNORE:
        raise ValueError(f"targets must lie in [0, {config.vocab}) or be {IGNORE}")
    return tokens, targets


# ---------------------------------------------------------------------------
# forward pieces


def _heads(x: np.ndarray, n_heads: int) -> np.ndarray:
    r, h = x.shape
    return x.reshape(r, n_heads, h // n_heads).transpose(1, 0, 2)


def _merge_heads(x: np.ndarray) -> np.ndarray:
    nh, r, d = x.shape
    return x.transpose(1, 0, 2).reshape(r, nh * d)


def causal_allowed(q_pos: np.ndarray, k_pos: np.ndarray) -> np.ndarray:
    """Entry (i, j) is allowed iff key j sits at or before query i in the original order."""
    return k_pos[None, :] <= q_pos[:, None]


def attention(q, k, v, q_pos, k_pos, n_heads):
    """Multi-head causal attention; returns ``(context, probs)`` with probs ``heads x nq x nk``."""
    qh, kh, vh = _heads(q, n_heads), _heads(k, n_heads), _heads(v, n_heads)
    scale = 1.0 / np.sqrt(qh.shape[-1])
    scores = np.matmul(qh, kh.transpose(0, 2, 1)) * scale
    probs = tc.row_softmax_masked(scores, causal_allowed(q_pos, k_pos))
    return _merge_heads(np.matmul(probs, vh)), probs


def attention_backward(d_ctx, probs, q, k, v, n_heads):
    """Returns ``(dq, dk, dv)`` for all query rows and all key rows."""
    qh, kh, vh = _heads(q, n_heads), _heads(k, n_heads), _heads(v, n_heads)
    dch = _heads(d_ctx, n_heads)
    scale = 1.0 / np.sqrt(qh.shape[-1])
    d_probs = np.matmul(dch, vh.transpose(0, 2, 1))
    dvh = np.matmul(probs.transpose(0, 2, 1), dch)
    d_scores = tc.softmax_backward(probs, d_probs) * scale
    dqh = np.matmul(d_scores, kh)
    dkh = np.matmul(d_scores.transpose(0, 2, 1), qh)
    return _merge_heads(dqh), _merge_heads(dkh), _merge_heads(dvh)


class _Runtime:
    """Per-call options shared by the forward and backward engines."""

    def __init__(self, config, adapters=None, dropout_key=None):
        self.config = config
        self.adapters = adapters
        self.dropout_key = dropout_key
        self.frozen = adapters is not None and getattr(adapters, "freeze_backbone", True)

    def needs_input(self, prefix, wnames):
        """Whether the input of these projections must be cached (weight grads or an adapter need it)."""
        return not self.frozen or any(self.adapter(prefix + w) is not None for w in wnames)

    def adapter(self, name):
        if self.adapters is None:
            return None
        return self.adapters.get(name)

    def drop_scale(self, adapter, positions, n_in):
        if self.dropout_key is None or adapter.dropout_p == 0.0:
            return None
        return adapter.dropout_scale(self.dropout_key, positions, n_in, self.config.max_seq)


def _proj(rt, p, prefix, wname, x, positions, cache=None, layer=None):
    w, b = p[prefix + wname], p[prefix + PROJECTIONS[wname]]
    out = tc.matmul(x, w) + b
    ad = rt.adapter(prefix + wname)
    if ad is not None:
        ds = rt.drop_scale(ad, positions, x.shape[1])
        xin = x if ds is None else x * ds
        low = tc.matmul(xin, ad.down)
        out = out + ad.scale * tc.matmul(low, ad.up)
        if cache is not None:
            cache.put(layer, f"adapter.{wname}", low)
    return out


def _proj_backward(rt, p, prefix, wname, dy, x, positions, grads, agrads, cache, layer):
    w = p[prefix + wname]
    dx = tc.matmul(dy, w.T)
    if grads is not None and not rt.frozen:
        grads[prefix + wname] += tc.matmul(x.T, dy)
        grads[prefix + PROJECTIONS[wname]] += dy.sum(axis=0)
    ad = rt.adapter(prefix + wname)
    if ad is not None:
        low = cache.get(layer, f"adapter.{wname}")
        d_low = ad.scale * tc.matmul(dy, ad.up.T)
        ds = rt.drop_scale(ad, positions, x.shape[1])
        xin = x if ds is None else x * ds
        if agrads is not None:
            g = agrads[prefix + wname]
            g.up += ad.scale * tc.matmul(low.T, dy)
            g.down += tc.matmul(xin.T, d_low)
        d_x = tc.matmul(d_low, ad.down.T)
        dx = dx + (d_x if ds is None else d_x * ds)
    return dx


def _block_forward(rt, p, l, x_s, pos_s, x_c, pos_c, cache):
    """One pre-norm block over a gradient group ``x_s`` and a constant group ``x_c``."""
    cfg = rt.config
    pre = f"layers.{l}."
    g = p.layer(l)
    u_s, xh1, rs1 = tc.layer_norm(x_s, g["ln1.g"], g["ln1.b"])
    u_c = tc.layer_norm(x_c, g["ln1.g"], g["ln1.b"])[0]
    q_s = _proj(rt, p, pre, "wq", u_s, pos_s, cache, l)
    k_s = _proj(rt, p, pre, "wk", u_s, pos_s, cache, l)
    v_s = _proj(rt, p, pre, "wv", u_s, pos_s, cache, l)
    q_c = _proj(rt, p, pre, "wq", u_c, pos_c)
    k_c = _proj(rt, p, pre, "wk", u_c, pos_c)
    v_c = _proj(rt, p, pre, "wv", u_c, pos_c)
    # regrouped key order: constant rows first, then gradient rows
    k_all = np.concatenate([k_c, k_s])
    v_all = np.concatenate([v_c, v_s])
    pos_all = np.concatenate([pos_c, pos_s])
    ctx_s, a_s = attention(q_s, k_all, v_all, pos_s, pos_all, cfg.n_heads)
    ctx_c, a_c = attention(q_c, k_all, v_all, pos_c, pos_all, cfg.n_heads) if len(pos_c) else (q_c, None)
    xm_s = x_s + _proj(rt, p, pre, "wo", ctx_s, pos_s, cache, l)
    xm_c = x_c + _proj(rt, p, pre, "wo", ctx_c, pos_c)
    u2_s, xh2, rs2 = tc.layer_norm(xm_s, g["ln2.g"], g["ln2.b"])
    u2_c = tc.layer_norm(xm_c, g["ln2.g"], g["ln2.b"])[0]
    a_pre_s = _proj(rt, p, pre, "w1", u2_s, pos_s, cache, l)
    f_s = tc.gelu(a_pre_s)
    out_s = xm_s + _proj(rt, p, pre, "w2", f_s, pos_s, cache, l)
    f_c = tc.gelu(_proj(rt, p, pre, "w1", u2_c, pos_c))
    out_c = xm_c + _proj(rt, p, pre, "w2", f_c, pos_c)
    if cache is not None:
        for kind, val in (("ln1_xhat", xh1), ("ln1_rstd", rs1), ("q", q_s), ("k", k_s), ("v", v_s),
                          ("attn", a_s), ("ln2_xhat", xh2), ("ln2_rstd", rs2), ("ff_pre", a_pre_s)):
            cache.put(l, kind, val)
        # projection inputs are only needed for weight (or adapter) gradients
        for kind, val, ws in (("ln1_out", u_s, ("wq", "wk", "wv")), ("ctx", ctx_s, ("wo",)),
                              ("ln2_out", u2_s, ("w1",)), ("ff_hidden", f_s, ("w2",))):
            if rt.needs_input(pre, ws):
                cache.put(l, kind, val)
        cache.put(l, "k_value", k_c)
        cache.put(l, "v_value", v_c)
    return out_s, out_c, (a_s, a_c, pos_all)


def _block_backward(rt, p, l, cache, d_out, grads, agrads):
    """Backward through block ``l`` for the cached gradient rows; constant rows get none."""
    cfg = rt.config
    pre = f"layers.{l}."
    g = p.layer(l)
    pos_s = cache.sel_rows

    def c(kind):
        return cache.entries.get((l, kind))

    d_f = _proj_backward(rt, p, pre, "w2", d_out, c("ff_hidden"), pos_s, grads, agrads, cache, l)
    d_a = tc.gelu_backward(c("ff_pre"), d_f)
    d_u2 = _proj_backward(rt, p, pre, "w1", d_a, c("ln2_out"), pos_s, grads, agrads, cache, l)
    d_xm, dg2, db2 = tc.layer_norm_backward(d_u2, c("ln2_xhat"), c("ln2_rstd"), g["ln2.g"])
    d_xm = d_xm + d_out
    d_ctx = _proj_backward(rt, p, pre, "wo", d_xm, c("ctx"), pos_s, grads, agrads, cache, l)
    k_all = np.concatenate([c("k_value"), c("k")])
    v_all = np.concatenate([c("v_value"), c("v")])
    dq, dk_all, dv_all = attention_backward(d_ctx, c("attn"), c("q"), k_all, v_all, cfg.n_heads)
    n_c = c("k_value").shape[0]
    # keys/values of constant rows are plain values: their gradient is dropped here
    dk, dv = dk_all[n_c:], dv_all[n_c:]
    u = c("ln1_out")
    d_u = (_proj_backward(rt, p, pre, "wq", dq, u, pos_s, grads, agrads, cache, l)
           + _proj_backward(rt, p, pre, "wk", dk, u, pos_s, grads, agrads, cache, l)
           + _proj_backward(rt, p, pre, "wv", dv, u, pos_s, grads, agrads, cache, l))
    d_x, dg1, db1 = tc.layer_norm_backward(d_u, c("ln1_xhat"), c("ln1_rstd"), g["ln1.g"])
    if grads is not None:
        grads[pre + "ln2.g"] += dg2
        grads[pre + "ln2.b"] += db2
        grads[pre + "ln1.g"] += dg1
        grads[pre + "ln1.b"] += db1
    return d_x + d_xm


@dataclass
class ForwardResult:
    loss: float
    logits: np.ndarray
    cache: ActivationCache | None
    final_attn: np.ndarray
    row_losses: np.ndarray

    def __iter__(self):
        return iter((self.loss, self.logits, self.cache, self.final_attn))


def run_forward(params: Parameters, tokens, targets, sel_rows, const_rows, *,
                cache: ActivationCache | None = None, cache_from: int = 0,
                adapters=None, dropout_key=None) -> ForwardResult:
    """Forward over a two-group row partition (``sel_rows`` ascending, ``const_rows`` ascending).

    Layers ``>= cache_from`` and the head store their gradient-group tensors
    in ``cache``.  Logits, row losses and the final-layer attention are
    returned in original token order.
    """
    cfg = params.config
    tokens, targets = check_inputs(cfg, tokens, targets)
    n = len(tokens)
    sel_rows = np.asarray(sel_rows, dtype=np.int64)
    const_rows = np.asarray(const_rows, dtype=np.int64)
    rt = _Runtime(cfg, adapters, dropout_key)
    if cache is not None:
        cache.first_layer = cache_from
    x0 = params["tok_emb"][tokens] + params["pos_emb"][:n]
    x_s, x_c = x0[sel_rows], x0[const_rows]
    attn_parts = None
    for l in range(cfg.n_layers):
        lc = cache if (cache is not None and l >= cache_from) else None
        x_s, x_c, attn_parts = _block_forward(rt, params, l, x_s, sel_rows, x_c, const_rows, lc)
    u_s, xhf, rsf = tc.layer_norm(x_s, params["lnf.g"], params["lnf.b"])
    u_c = tc.layer_norm(x_c, params["lnf.g"], params["lnf.b"])[0]
    logit_s = tc.matmul(u_s, params["head"])
    logit_c = tc.matmul(u_c, params["head"])
    loss_s, probs_s = tc.cross_entropy_rows(logit_s, targets[sel_rows])
    loss_c, _ = tc.cross_entropy_rows(logit_c, targets[const_rows])
    if cache is not None:
        for kind, val in (("lnf_xhat", xhf), ("lnf_rstd", rsf), ("probs", probs_s)):
            cache.put(HEAD_LAYER, kind, val)
        if not rt.frozen:
            cache.put(HEAD_LAYER, "lnf_out", u_s)
    logits = np.empty((n, cfg.vocab))
    logits[sel_rows], logits[const_rows] = logit_s, logit_c
    row_losses = np.empty(n)
    row_losses[sel_rows], row_losses[const_rows] = loss_s, loss_c
    n_def = int((targets >= 0).sum())
    loss = float(row_losses.sum() / n_def) if n_def else 0.0
    a_s, a_c, pos_all = attn_parts
    final_attn = np.zeros((cfg.n_heads, n, n))
    final_attn[:, sel_rows[:, None], pos_all[None, :]] = a_s
    if a_c is not None:
        final_attn[:, const_rows[:, None], pos_all[None, :]] = a_c
    return ForwardResult(loss, logits, cache, final_attn, row_losses)


def run_backward(params: Parameters, cache: ActivationCache, *, adapters=None, dropout_key=None,
                 param_grads: bool = True, stop_layer: int | None = None):
    """Backward over the cached gradient rows.

    Returns ``(grads, adapter_grads, block_input_grads)``; ``block_input_grads[l]``
    is the n x H gradient w.r.t. the input of block ``l`` in original order
    (zero on constant rows).  ``stop_layer`` halts after that block.
    """
    cfg = params.config
    if cache.config != cfg:
        raise ValueError("cache was produced under a different model config")
    if not cache.has(HEAD_LAYER, "probs"):
        raise ValueError("cache holds no head tensors; run a caching forward first")
    rt = _Runtime(cfg, adapters, dropout_key)
    grads = Parameters.zeros(cfg) if (param_grads and not rt.frozen) else None
    agrads = adapters.zeros_like() if adapters is not None else None
    targets = cache.targets
    sel = cache.sel_rows
    n_def = int((targets >= 0).sum())
    block_inputs: dict[int, np.ndarray] = {}
    if n_def == 0:
        for l in range(cfg.n_layers - 1, (stop_layer or 0) - 1, -1):
            block_inputs[l] = np.zeros((cache.n, cfg.hidden))
        return grads, agrads, block_inputs
    d_logits = tc.cross_entropy_backward(cache.get(HEAD_LAYER, "probs"), targets[sel], n_def)
    if grads is not None:
        grads["head"] += tc.matmul(cache.get(HEAD_LAYER, "lnf_out").T, d_logits)
    d_u = tc.matmul(d_logits, params["head"].T)
    d_x, dgf, dbf = tc.layer_norm_backward(d_u, cache.get(HEAD_LAYER, "lnf_xhat"),
                                           cache.get(HEAD_LAYER, "lnf_rstd"), params["lnf.g"])
    if grads is not None:
        grads["lnf.g"] += dgf
        grads["lnf.b"] += dbf
    last = stop_layer if stop_layer is not None else 0
    if last < cache.first_layer:
        raise ValueError(f"cache starts at layer {cache.first_layer}; cannot backpropagate to {last}")
    for l in range(cfg.n_layers - 1, last - 1, -1):
        d_x = _block_backward(rt, params, l, cache, d_x, grads, agrads)
        full = np.zeros((cache.n, cfg.hidden))
        full[sel] = d_x
        block_inputs[l] = full
    if stop_layer is None and grads is not None:
        np.add.at(grads["tok_emb"], cache.tokens[sel], d_x)
        np.add.at(grads["pos_emb"], sel, d_x)
    return grads, agrads, block_inputs


# ---------------------------------------------------------------------------
# public operations


def forward_full(params: Parameters, tokens, targets, *, adapters=None, dropout_key=None) -> ForwardResult:
    """Standard causal forward caching every tensor the full backward needs.

    Unpacks as ``loss, logits, cache, final_attn``.
    """
    tokens, targets = check_inputs(params.config, tokens, targets)
    n = len(tokens)
    rows = np.arange(n)
    cache = ActivationCache(params.config, tokens, targets, rows, rows[:0])
    return run_forward(params, tokens, targets, rows, rows[:0], cache=cache,
                       adapters=adapters, dropout_key=dropout_key)


def backward_full(params: Parameters, cache: ActivationCache, tokens=None, targets=None) -> Gradients:
    """Exact gradients of the mean cross-entropy w.r.t. every parameter.

    The returned object carries ``block_input_grads`` (per-block input gradients).
    """
    _check_cache_inputs(cache, tokens, targets)
    if len(cache.const_rows):
        raise ValueError("backward_full needs a full cache; use backward_ditched for split caches")
    grads, _, block_inputs = run_backward(params, cache)
    grads.block_input_grads = block_inputs
    return grads


def _check_cache_inputs(cache, tokens, targets):
    if tokens is not None and not np.array_equal(np.asarray(tokens), cache.tokens):
        raise ValueError("tokens differ from those the cache was built on")
    if targets is not None and not np.array_equal(np.asarray(targets), cache.targets):
        raise ValueError("targets differ from those the cache was built on")


def penultimate_pass(params: Parameters, tokens, targets, adapters=None):
    """Forward caching only the final block and head, then backward to its input.

    Returns ``(G, final_attn, cache, loss)`` with ``G = dL/dz^(L-1)``.
    """
    cfg = params.config
    tokens, targets = check_inputs(cfg, tokens, targets)
    rows = np.arange(len(tokens))
    last = cfg.n_layers - 1
    cache = ActivationCache(cfg, tokens, targets, rows, rows[:0])
    res = run_forward(params, tokens, targets, rows, rows[:0], cache=cache, cache_from=last, adapters=adapters)
    _, _, block_inputs = run_backward(params, cache, adapters=adapters, param_grads=False, stop_layer=last)
    return block_inputs[last], res.final_attn, cache, res.loss


def partial_backward_penultimate(params: Parameters, tokens, targets) -> np.ndarray:
    """Gradient of the loss w.r.t. the input of the final decoder block (n x H)."""
    return penultimate_pass(params, tokens, targets)[0]


# ---------------------------------------------------------------------------
# checkpoints

MAGIC = b"TSEEKCKP"
FORMAT_VERSION = 1
ADAPTER_TAG = b"ADPT"
_CONFIG_FMT = "<7q"


def checkpoint_bytes(params: Parameters, adapters=None) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", FORMAT_VERSION))
    buf.write(struct.pack(_CONFIG_FMT, *params.config.as_tuple()))
    for _, arr in params.items():
        buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    if adapters is not None:
        buf.write(ADAPTER_TAG)
        buf.write(adapters.to_bytes())
    return buf.getvalue()


def save_checkpoint(path, params: Parameters, adapters=None) -> None:
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(params, adapters))


def load_checkpoint_bytes(blob: bytes):
    """Returns ``(params, adapter_section_bytes_or_None)``."""
    if blob[:8] != MAGIC:
        raise ValueError("not a tokenseek checkpoint (bad magic)")
    (version,) = struct.unpack_from("<I", blob, 8)
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    off = 12
    config = ModelConfig(*struct.unpack_from(_CONFIG_FMT, blob, off))
    off += struct.calcsize(_CONFIG_FMT)
    tensors = OrderedDict()
    for name, shape in param_shapes(config):
        size = int(np.prod(shape))
        arr = np.frombuffer(blob, dtype="<f8", count=size, offset=off).astype(np.float64)
        tensors[name] = arr.reshape(shape)
        off += 8 * size
    rest = blob[off:]
    if not rest:
        return Parameters(config, tensors), None
    if rest[:4] != ADAPTER_TAG:
        raise ValueError("trailing bytes after parameters are not an adapter section")
    return Parameters(config, tensors), rest[4:]


def load_checkpoint(path):
    with open(path, "rb") as fh:
        return load_checkpoint_bytes(fh.read())


def loss_only(params: Parameters, tokens, targets, adapters=None) -> float:
    """Forward without any caching; returns the mean cross-entropy."""
    rows = np.arange(len(tokens))
    return run_forward(params, tokens, targets, rows, rows[:0], adapters=adapters).loss
