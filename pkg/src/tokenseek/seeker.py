"""Per-instance token importance and top-k selection.

A token's context score is the attention it receives: the column sum of the
head-averaged final-layer attention map.  Its gradient score accumulates
``dL/dz`` at the input of the last decoder block over the hidden dimension.
The fused score is ``alpha * log(context) + beta * minmax(gradient)``.
"""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import tensorcore as tc
from .data import EncodedInstance, instance_targets, truncate
from .ditcher import SelectionMask, selection_size
from .model import Parameters, next_token_targets, penultimate_pass, partial_backward_penultimate

log = logging.getLogger(__name__)

EPS = 1e-12
DEFAULT_ALPHA = 5.0
DEFAULT_BETA = 5.0
SCORE_FORMAT = "tokenseek-scores v1"


def context_scores(final_attn) -> np.ndarray:
    """Column sums of the head-averaged attention map."""
    attn = np.asarray(final_attn, dtype=np.float64)
    if attn.ndim == 2:
        attn = attn[None]
    if attn.ndim != 3 or attn.shape[1] != attn.shape[2]:
        raise ValueError(f"expected heads x n x n attention, got shape {attn.shape}")
    if np.abs(attn.sum(axis=-1) - 1.0).max() > 1e-9 or attn.min() < 0:
        raise ValueError("attention rows are not stochastic")
    return attn.mean(axis=0).sum(axis=0)


def gradient_scores(params: Parameters, tokens, targets=None, magnitude: bool = True) -> np.ndarray:
    targets = next_token_targets(tokens) if targets is None else targets
    G = partial_backward_penultimate(params, tokens, targets)
    return _accumulate(G, magnitude)


def _accumulate(G: np.ndarray, magnitude: bool) -> np.ndarray:
    return np.abs(G).sum(axis=1) if magnitude else G.sum(axis=1)


def combine_scores(i1, i2, alpha: float = DEFAULT_ALPHA, beta: float = DEFAULT_BETA, eps: float = EPS) -> np.ndarray:
    i1, i2 = np.asarray(i1, dtype=np.float64), np.asarray(i2, dtype=np.float64)
    if i1.shape != i2.shape:
        raise ValueError(f"score lengths differ: {i1.shape} vs {i2.shape}")
    if alpha < 0 or beta < 0:
        raise ValueError("alpha and beta must be non-negative")
    if alpha == 0 and beta == 0:
        raise ValueError("alpha = beta = 0 leaves no ranking signal")
    return alpha * tc.stable_log(i1, eps) + beta * tc.minmax_norm(i2, eps)


def select_tokens(fused, ratio: float) -> SelectionMask:
    """The ``max(1, round_half_up(ratio * n))`` highest scores; ties go to the lower index."""
    fused = np.asarray(fused, dtype=np.float64)
    n = len(fused)
    k = selection_size(n, ratio)
    order = np.lexsort((np.arange(n), -fused))
    return SelectionMask(n, np.sort(order[:k]))


@dataclass
class TokenScores:
    instance_id: str
    i1: np.ndarray
    i2: np.ndarray
    alpha: float = DEFAULT_ALPHA
    beta: float = DEFAULT_BETA
    fused: np.ndarray = field(init=False)

    def __post_init__(self):
        self.i1 = np.asarray(self.i1, dtype=np.float64)
        self.i2 = np.asarray(self.i2, dtype=np.float64)
        self.fused = combine_scores(self.i1, self.i2, self.alpha, self.beta)

    @property
    def n(self) -> int:
        return len(self.i1)

    def reweighted(self, alpha: float, beta: float) -> "TokenScores":
        return TokenScores(self.instance_id, self.i1, self.i2, alpha, beta)

    def mask(self, ratio: float) -> SelectionMask:
        return select_tokens(self.fused, ratio)


def score_instance(params: Parameters, inst: EncodedInstance, alpha=DEFAULT_ALPHA, beta=DEFAULT_BETA,
                   magnitude: bool = True, targets=None) -> TokenScores:
    """Context and gradient scores from one forward plus a partial backward."""
    targets = next_token_targets(inst.ids) if targets is None else targets
    G, final_attn, _, _ = penultimate_pass(params, inst.ids, targets)
    return TokenScores(inst.id, context_scores(final_attn), _accumulate(G, magnitude), alpha, beta)


@dataclass
class ScoreFile:
    scores: list[TokenScores]
    alpha: float
    beta: float
    magnitude: bool
    model_checksum: str
    warnings: list[str] = field(default_factory=list)

    def by_id(self) -> dict[str, TokenScores]:
        return {s.instance_id: s for s in self.scores}


def score_corpus(params: Parameters, corpus: list[EncodedInstance], alpha=DEFAULT_ALPHA, beta=DEFAULT_BETA,
                 magnitude: bool = True, n_jobs: int = 1, loss_on: str = "all") -> ScoreFile:
    """Score every instance once, before training; results are in corpus order."""
    combine_scores([1.0], [1.0], alpha, beta)  # reject bad weights before any work
    max_seq = params.config.max_seq
    warnings, work = [], []
    for inst in corpus:
        if inst.n > max_seq:
            warnings.append(f"instance={inst.id} truncated from {inst.n} to {max_seq} tokens")
            log.warning(warnings[-1])
            inst = truncate(inst, max_seq)
        work.append(inst)

    def one(inst):
        return score_instance(params, inst, alpha, beta, magnitude, instance_targets(inst, loss_on))

    if n_jobs > 1:
        with ThreadPoolExecutor(n_jobs) as pool:
            scores = list(pool.map(one, work))
    else:
        scores = [one(inst) for inst in work]
    return ScoreFile(scores, float(alpha), float(beta), bool(magnitude), params.checksum(), warnings)


def format_score_file(sf: ScoreFile, config_line: str | None = None) -> str:
    """``config_line`` is an optional free-form provenance header (kept, ignored on read)."""
    lines = [f"# {SCORE_FORMAT}",
             f"# alpha={sf.alpha!r} beta={sf.beta!r} magnitude={int(sf.magnitude)} model_checksum={sf.model_checksum}"]
    if config_line:
        lines.append(f"# config {config_line}")
    lines += [f"# warning {w}" for w in sf.warnings]
    lines.append("instance_id,token_index,i1,i2")
    for s in sf.scores:
        for j in range(s.n):
            lines.append(f"{s.instance_id},{j},{s.i1[j]:.17g},{s.i2[j]:.17g}")
    return "\n".join(lines) + "\n"


def write_score_file(path, sf: ScoreFile, config_line: str | None = None) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(format_score_file(sf, config_line))


def read_score_file(path, alpha: float | None = None, beta: float | None = None) -> ScoreFile:
    """Parse a score file; fused scores are recomputed with the given (or stored) weights."""
    meta, warnings, rows = {}, [], {}
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().strip()
        if header != f"# {SCORE_FORMAT}":
            raise ValueError(f"{path}: not a score file (header {header!r})")
        for line in fh:
            line = line.rstrip("\n")
            if line.startswith("# config "):
                continue
            if line.startswith("# warning "):
                warnings.append(line[len("# warning "):])
            elif line.startswith("# "):
                meta.update(kv.split("=", 1) for kv in line[2:].split())
            elif line == "instance_id,token_index,i1,i2" or not line:
                continue
            else:
                rid, j, a, b = line.rsplit(",", 3)
                rows.setdefault(rid, []).append((int(j), float(a), float(b)))
    a = float(meta["alpha"]) if alpha is None else alpha
    b = float(meta["beta"]) if beta is None else beta
    scores = []
    for rid, entries in rows.items():
        entries.sort()
        if [e[0] for e in entries] != list(range(len(entries))):
            raise ValueError(f"{path}: token indices of {rid!r} are not contiguous")
        scores.append(TokenScores(rid, [e[1] for e in entries], [e[2] for e in entries], a, b))
    return ScoreFile(scores, a, b, meta.get("magnitude", "1") == "1", meta.get("model_checksum", ""), warnings)
