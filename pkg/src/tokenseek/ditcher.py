"""Split-path forward and selective ("ditched") backward.

Tokens are divided into a selected group, whose computation paths keep their
gradients, and an unselected group computed as constants.  Selected queries
still attend to the unselected keys and values, so the forward pass is the
same as the full model's; only the backward (and the cache) shrinks.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .model import ActivationCache, ForwardResult, Gradients, Parameters, check_inputs, run_backward, run_forward


def selection_size(n: int, ratio: float) -> int:
    """``max(1, round_half_up(ratio * n))`` evaluated on the decimal value of ``ratio``."""
    if not 0 < ratio <= 1:
        raise ValueError(f"ratio must lie in (0, 1], got {ratio}")
    exact = Fraction(repr(float(ratio))) * n
    return max(1, int(exact + Fraction(1, 2)))


@dataclass(frozen=True)
class SelectionMask:
    n: int
    selected: np.ndarray
    unselected: np.ndarray = field(default=None)

    def __post_init__(self):
        sel = np.unique(np.asarray(self.selected, dtype=np.int64))
        if len(sel) != len(np.asarray(self.selected)):
            raise ValueError("selected indices repeat")
        if len(sel) == 0:
            raise ValueError("a selection needs at least one token")
        if sel[0] < 0 or sel[-1] >= self.n:
            raise IndexError(f"selected index out of range for n={self.n}")
        unsel = np.setdiff1d(np.arange(self.n), sel)
        if self.unselected is not None and not np.array_equal(np.asarray(self.unselected), unsel):
            raise ValueError("unselected indices must be the complement of selected")
        sel.setflags(write=False)
        unsel.setflags(write=False)
        object.__setattr__(self, "selected", sel)
        object.__setattr__(self, "unselected", unsel)

    @classmethod
    def full(cls, n: int) -> "SelectionMask":
        return cls(n, np.arange(n))

    @classmethod
    def from_bool(cls, flags) -> "SelectionMask":
        flags = np.asarray(flags, dtype=bool)
        return cls(len(flags), np.flatnonzero(flags))

    @property
    def k(self) -> int:
        return len(self.selected)

    @property
    def permutation(self) -> np.ndarray:
        """Original index of each row in regrouped order ``[unselected, selected]``."""
        return np.concatenate([self.unselected, self.selected])

    @property
    def inverse_permutation(self) -> np.ndarray:
        inv = np.empty(self.n, dtype=np.int64)
        inv[self.permutation] = np.arange(self.n)
        return inv

    def as_bool(self) -> np.ndarray:
        out = np.zeros(self.n, dtype=bool)
        out[self.selected] = True
        return out

    def __eq__(self, other):
        return (isinstance(other, SelectionMask) and self.n == other.n
                and np.array_equal(self.selected, other.selected))

    def __hash__(self):
        return hash((self.n, self.selected.tobytes()))


class SelectiveCache(ActivationCache):
    """Cache of a split forward: selected rows plus value-only unselected keys/values."""

    def __init__(self, config, tokens, targets, mask: SelectionMask):
        super().__init__(config, tokens, targets, mask.selected, mask.unselected)
        self.mask = mask


def partition(hidden: np.ndarray, mask: SelectionMask):
    """Split rows into ``(selected, unselected)``, each in ascending original order."""
    if hidden.shape[0] != mask.n:
        raise ValueError(f"hidden has {hidden.shape[0]} rows, mask expects {mask.n}")
    return hidden[mask.selected], hidden[mask.unselected]


def reorganize(out_t: np.ndarray, out_tbar: np.ndarray, mask: SelectionMask) -> np.ndarray:
    """Inverse of :func:`partition`."""
    if out_t.shape[0] != mask.k or out_tbar.shape[0] != mask.n - mask.k:
        raise ValueError(f"row counts ({out_t.shape[0]}, {out_tbar.shape[0]}) do not match "
                         f"mask groups ({mask.k}, {mask.n - mask.k})")
    if out_t.shape[1:] != out_tbar.shape[1:] and out_tbar.shape[0] and out_t.shape[0]:
        raise ValueError("group widths differ")
    regrouped = np.concatenate([out_tbar, out_t]) if out_tbar.size else out_t
    return regrouped[mask.inverse_permutation]


def forward_split(params: Parameters, tokens, targets, mask: SelectionMask, *,
                  adapters=None, dropout_key=None) -> ForwardResult:
    """Forward with selected/unselected groups; outputs equal the full forward's.

    Unpacks as ``loss, logits, scache, final_attn``.
    """
    tokens, targets = check_inputs(params.config, tokens, targets)
    if mask.n != len(tokens):
        raise ValueError(f"mask covers {mask.n} tokens, sequence has {len(tokens)}")
    scache = SelectiveCache(params.config, tokens, targets, mask)
    return run_forward(params, tokens, targets, mask.selected, mask.unselected, cache=scache,
                       adapters=adapters, dropout_key=dropout_key)


def backward_ditched(params: Parameters, scache: SelectiveCache, tokens, targets,
                     mask: SelectionMask) -> Gradients:
    """Gradients with every unselected-token path treated as a constant."""
    if not isinstance(scache, SelectiveCache) or scache.mask != mask:
        raise ValueError("mask does not match the one the selective cache was built with")
    if not np.array_equal(np.asarray(tokens), scache.tokens) or not np.array_equal(np.asarray(targets), scache.targets):
        raise ValueError("tokens/targets differ from those the cache was built on")
    grads, _, block_inputs = run_backward(params, scache)
    grads.block_input_grads = block_inputs
    return grads
