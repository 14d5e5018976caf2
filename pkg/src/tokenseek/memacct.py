"""Cached-activation accounting, measured and analytic.

Memory is counted in cached float64 scalars rather than bytes.  The analytic
estimator mirrors this package's cache inventory exactly, so for every
configuration the measured count of a cache equals the estimate.

Per decoder block, with ``s`` tokens of which ``k`` carry gradients::

    attention maps     n_h * k * s
    queries/keys/vals  3 * H * k
    K/V value-only     2 * H * (s - k)
    norm statistics    2 * k
    ff pre-activation  F * k
    hidden streams     (5 * H + F) * k

so a full block holds ``n_h * s**2 + (8 * H + 2 * F + 2) * s`` scalars, i.e.
``n_h s^2 + c s H`` with ``c = 8 + (2 F + 2) / H``.  The head adds
``(2 * H + V + 1) * k`` (final norm input and statistics, its output, and the
softmax probabilities).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction

from .ditcher import selection_size
from .model import CATEGORIES, PROJECTIONS, ModelConfig


@dataclass
class MemoryReport:
    categories: dict[str, int] = field(default_factory=lambda: dict.fromkeys(CATEGORIES, 0))
    total_scalars: int = 0
    peak_scalars: int = 0
    average_scalars: float = 0.0
    ratio_vs_full: float | None = None

    @property
    def kv_overhead(self) -> int:
        return self.categories.get("kv_value", 0)

    def lines(self) -> list[str]:
        """Machine-readable ``category,scalars`` lines."""
        out = [f"{k},{v}" for k, v in self.categories.items()]
        out += [f"total,{self.total_scalars}", f"peak,{self.peak_scalars}",
                f"average,{self.average_scalars!r}"]
        if self.ratio_vs_full is not None:
            out.append(f"ratio_vs_full,{self.ratio_vs_full!r}")
        return out

    def table(self) -> str:
        width = max(len(k) for k in self.categories) + 2
        rows = [f"{'category':<{width}}{'scalars':>14}"]
        rows += [f"{k:<{width}}{v:>14,}" for k, v in self.categories.items()]
        rows.append(f"{'total':<{width}}{self.total_scalars:>14,}")
        rows.append(f"{'peak':<{width}}{self.peak_scalars:>14,}")
        rows.append(f"{'average':<{width}}{self.average_scalars:>14,.1f}")
        if self.ratio_vs_full is not None:
            rows.append(f"{'ratio_vs_full':<{width}}{self.ratio_vs_full:>14.6f}")
        return "\n".join(rows)


def count_cache(cache) -> MemoryReport:
    if cache is None:
        return MemoryReport()
    cats = cache.by_category()
    total = sum(cats.values())
    return MemoryReport(cats, total, total, float(total))


def _needs(adapter_targets, frozen, layer, wnames):
    if not frozen:
        return True
    return any(f"layers.{layer}.{w}" in adapter_targets for w in wnames)


def estimate_breakdown(config: ModelConfig, s: int, k: int, B: int = 1, *,
                       adapter_targets=(), adapter_rank: int = 0, frozen: bool = False) -> dict[str, int]:
    """Exact per-category cached scalars for ``s`` tokens with ``k`` gradient rows."""
    if not 1 <= k <= s:
        raise ValueError(f"need 1 <= k <= s, got k={k}, s={s}")
    if s > config.max_seq:
        raise ValueError(f"s={s} exceeds max_seq={config.max_seq}")
    H, F, V, nh = config.hidden, config.ff_dim, config.vocab, config.n_heads
    targets = set(adapter_targets)
    cats = dict.fromkeys(CATEGORIES, 0)
    for l in range(config.n_layers):
        cats["attention"] += nh * k * s
        cats["qkv"] += 3 * H * k
        cats["kv_value"] += 2 * H * (s - k)
        cats["norm"] += 2 * k
        cats["ff_pre"] += F * k
        hidden = 2 * H * k
        for width, ws in ((H, ("wq", "wk", "wv")), (H, ("wo",)), (H, ("w1",)), (F, ("w2",))):
            if _needs(targets, frozen, l, ws):
                hidden += width * k
        cats["hidden"] += hidden
        cats["adapter"] += sum(adapter_rank * k for w in PROJECTIONS if f"layers.{l}.{w}" in targets)
    cats["hidden"] += (H + V) * k + (0 if frozen else H * k)
    cats["norm"] += k
    return {c: B * v for c, v in cats.items()}


def estimate_full(config: ModelConfig, B: int, s: int, **kw) -> int:
    return sum(estimate_breakdown(config, s, s, B, **kw).values())


def estimate_ditched(config: ModelConfig, B: int, s: int, r: float, **kw) -> int:
    return sum(estimate_breakdown(config, s, selection_size(s, r), B, **kw).values())


def row_constant(config: ModelConfig) -> Fraction:
    """The ``c`` in ``n_h s^2 + c s H`` for one block of this implementation."""
    return Fraction(8 * config.hidden + 2 * config.ff_dim + 2, config.hidden)


def leading_terms(B: int, n_heads: int, s: int, H: int) -> dict[str, int | float]:
    """Leading activation terms ``B n_h s^2 + B s H`` of one layer against ``H^2`` weights."""
    attention = B * n_heads * s * s
    hidden = B * s * H
    weights = H * H
    return {"attention": attention, "hidden": hidden, "total": attention + hidden,
            "weights": weights, "ratio": (attention + hidden) / weights}


def leading_attention_ditched(B: int, n_heads: int, s: int, r: float) -> dict[str, int | float]:
    """Attention term when only ``k`` query rows are kept (all keys are still read)."""
    k = selection_size(s, r)
    term = B * n_heads * k * s
    return {"k": k, "attention": term, "fraction": term / (B * n_heads * s * s)}


@dataclass
class RatioBreakdown:
    s: int
    k: int
    ratio: float
    selected_fraction: float
    kv_overhead: int
    kv_overhead_fraction: float


def ratio_vs_full(config: ModelConfig, s: int, r: float, **kw) -> RatioBreakdown:
    """Ditched / full cached scalars, split into the selected fraction and the K/V overhead.

    ``ratio == k/s + kv_overhead/full`` holds exactly for this inventory.
    """
    k = selection_size(s, r)
    full = estimate_full(config, 1, s, **kw)
    br = estimate_breakdown(config, s, k, **kw)
    total = sum(br.values())
    return RatioBreakdown(s, k, total / full, k / s, br["kv_value"], br["kv_value"] / full)


class MemoryTracker:
    """Collects per-sample cache totals over a run; peak and average are over samples."""

    def __init__(self):
        self.samples: list[int] = []
        self.categories_at_peak = dict.fromkeys(CATEGORIES, 0)

    def record(self, cache) -> int:
        rep = count_cache(cache)
        if not self.samples or rep.total_scalars > max(self.samples):
            self.categories_at_peak = rep.categories
        self.samples.append(rep.total_scalars)
        return rep.total_scalars

    def report(self, full_peak: int | None = None) -> MemoryReport:
        if not self.samples:
            return MemoryReport()
        peak = max(self.samples)
        avg = sum(self.samples) / len(self.samples)
        ratio = peak / full_peak if full_peak else None
        return MemoryReport(dict(self.categories_at_peak), peak, peak, avg, ratio)
