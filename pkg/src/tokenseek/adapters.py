"""Low-rank adapters on the model's projections.

An adapted projection computes ``x W + b + (alpha / rank) * drop(x) A B`` with
``A`` (``down``) Gaussian-initialised and ``B`` (``up``) zero-initialised, so
the adapted model starts out identical to the backbone.  The backbone is
frozen: backward produces gradients for ``A`` and ``B`` only.
"""
from __future__ import annotations

import io
import struct
import zlib
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from .ditcher import SelectionMask, forward_split
from .model import (PROJECTIONS, ForwardResult, Parameters, forward_full, run_backward)


@dataclass
class AdapterConfig:
    rank: int = 8
    alpha: float = 16.0
    dropout: float = 0.05
    seed: int = 0
    init_scale: float | None = None  # default 1/sqrt(in_features)


class LoraAdapter:
    def __init__(self, target: str, down: np.ndarray, up: np.ndarray, alpha: float,
                 dropout_p: float = 0.0, rng_seed: int = 0):
        if down.shape[1] != up.shape[0]:
            raise ValueError("down/up ranks disagree")
        if not 0.0 <= dropout_p < 1.0:
            raise ValueError("dropout_p must lie in [0, 1)")
        self.target = target
        self.down = down
        self.up = up
        self.alpha = float(alpha)
        self.dropout_p = float(dropout_p)
        self.rng_seed = int(rng_seed)

    @property
    def rank(self) -> int:
        return self.down.shape[1]

    @property
    def scale(self) -> float:
        return self.alpha / self.rank

    def count(self) -> int:
        return self.down.size + self.up.size

    def dropout_scale(self, key: int, positions, n_in: int, max_seq: int) -> np.ndarray:
        """Inverted-dropout multipliers for the given token positions.

        Drawn from a Philox stream keyed by (seed, target) at counter ``key``
        over the full ``max_seq x n_in`` grid, so any row subset of the same
        call replays the same mask.
        """
        bitgen = np.random.Philox(key=np.array([self.rng_seed, zlib.crc32(self.target.encode())], dtype=np.uint64),
                                  counter=np.array([int(key), 0, 0, 0], dtype=np.uint64))
        u = np.random.Generator(bitgen).random((max_seq, n_in))
        keep = (u >= self.dropout_p) / (1.0 - self.dropout_p)
        return keep[np.asarray(positions, dtype=np.int64)]

    def copy(self) -> "LoraAdapter":
        return LoraAdapter(self.target, self.down.copy(), self.up.copy(), self.alpha, self.dropout_p, self.rng_seed)


@dataclass
class LoraGrad:
    down: np.ndarray
    up: np.ndarray


class AdapterSet:
    """Ordered adapters keyed by projection name (``layers.<l>.<w>``)."""

    freeze_backbone = True

    def __init__(self, adapters: "OrderedDict[str, LoraAdapter] | None" = None):
        self.adapters = adapters or OrderedDict()

    def get(self, name):
        return self.adapters.get(name)

    def __contains__(self, name):
        return name in self.adapters

    def __getitem__(self, name):
        return self.adapters[name]

    def __len__(self):
        return len(self.adapters)

    def items(self):
        return self.adapters.items()

    def count(self) -> int:
        return sum(a.count() for a in self.adapters.values())

    def zeros_like(self) -> dict[str, LoraGrad]:
        return {k: LoraGrad(np.zeros_like(a.down), np.zeros_like(a.up)) for k, a in self.adapters.items()}

    def copy(self) -> "AdapterSet":
        return AdapterSet(OrderedDict((k, a.copy()) for k, a in self.adapters.items()))

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        buf.write(struct.pack("<I", len(self.adapters)))
        for name, a in self.adapters.items():
            raw = name.encode()
            buf.write(struct.pack("<I", len(raw)))
            buf.write(raw)
            n_in, n_out = a.down.shape[0], a.up.shape[1]
            buf.write(struct.pack("<3q2d", n_in, a.rank, n_out, a.alpha, a.dropout_p))
            buf.write(struct.pack("<q", a.rng_seed))
            buf.write(np.ascontiguousarray(a.down, dtype="<f8").tobytes())
            buf.write(np.ascontiguousarray(a.up, dtype="<f8").tobytes())
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, blob: bytes) -> "AdapterSet":
        (count,) = struct.unpack_from("<I", blob, 0)
        off = 4
        out = OrderedDict()
        for _ in range(count):
            (ln,) = struct.unpack_from("<I", blob, off)
            off += 4
            name = blob[off:off + ln].decode()
            off += ln
            n_in, rank, n_out, alpha, p = struct.unpack_from("<3q2d", blob, off)
            off += struct.calcsize("<3q2d")
            (seed,) = struct.unpack_from("<q", blob, off)
            off += 8
            down = np.frombuffer(blob, "<f8", n_in * rank, off).reshape(n_in, rank).astype(np.float64)
            off += 8 * n_in * rank
            up = np.frombuffer(blob, "<f8", rank * n_out, off).reshape(rank, n_out).astype(np.float64)
            off += 8 * rank * n_out
            out[name] = LoraAdapter(name, down, up, alpha, p, seed)
        return cls(out)


@dataclass
class AdaptedParameters:
    params: Parameters
    adapters: AdapterSet

    @property
    def config(self):
        return self.params.config


def resolve_targets(config, targets) -> list[str]:
    """Expand short names: ``"ff"`` -> every w1/w2, ``"attn"`` -> every wq/wk/wv/wo, ``"w1"`` -> all layers."""
    if isinstance(targets, str):
        targets = [t for t in targets.split(",") if t]
    groups = {"ff": ("w1", "w2"), "attn": ("wq", "wk", "wv", "wo"), "all": tuple(PROJECTIONS)}
    out = []
    for t in targets:
        if t in groups or t in PROJECTIONS:
            short = groups.get(t, (t,))
            out += [f"layers.{l}.{w}" for l in range(config.n_layers) for w in short]
        else:
            parts = t.split(".")
            if (len(parts) != 3 or parts[0] != "layers" or not parts[1].isdigit()
                    or int(parts[1]) >= config.n_layers or parts[2] not in PROJECTIONS):
                raise KeyError(f"unknown adapter target {t!r}")
            out.append(t)
    seen = set()
    return [t for t in out if not (t in seen or seen.add(t))]


def attach(params: Parameters, targets=("ff",), adapter_config: AdapterConfig | None = None) -> AdaptedParameters:
    """Wrap ``params`` with zero-initialised low-rank adapters on ``targets``."""
    ac = adapter_config or AdapterConfig()
    if ac.rank < 1:
        raise ValueError("adapter rank must be >= 1")
    names = resolve_targets(params.config, targets)
    rng = np.random.default_rng(ac.seed)
    out = OrderedDict()
    for name in names:
        n_in, n_out = params[name].shape
        std = ac.init_scale if ac.init_scale is not None else 1.0 / np.sqrt(n_in)
        down = rng.standard_normal((n_in, ac.rank)) * std
        up = np.zeros((ac.rank, n_out))
        out[name] = LoraAdapter(name, down, up, ac.alpha, ac.dropout, ac.seed)
    return AdaptedParameters(params, AdapterSet(out))


def adapted_forward(ap: AdaptedParameters, tokens, targets, mask: SelectionMask | None = None,
                    dropout_key: int | None = None) -> ForwardResult:
    """Forward with adapters; ``dropout_key=None`` disables adapter dropout (evaluation)."""
    if mask is None:
        return forward_full(ap.params, tokens, targets, adapters=ap.adapters, dropout_key=dropout_key)
    return forward_split(ap.params, tokens, targets, mask, adapters=ap.adapters, dropout_key=dropout_key)


def adapted_backward(ap: AdaptedParameters, cache, dropout_key: int | None = None):
    """Returns ``(backbone_grads, adapter_grads)``; backbone grads are all zero (frozen)."""
    _, agrads, _ = run_backward(ap.params, cache, adapters=ap.adapters, dropout_key=dropout_key)
    return Parameters.zeros(ap.config), agrads
