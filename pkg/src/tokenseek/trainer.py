"""Fine-tuning loop: full, random-token and seek-token modes."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .adapters import AdapterConfig, AdaptedParameters, attach
from .data import EncodedInstance, instance_targets
from .ditcher import SelectionMask, backward_ditched, forward_split, selection_size
from .memacct import MemoryReport, MemoryTracker, estimate_breakdown, estimate_full
from .model import Parameters, backward_full, forward_full, loss_only, run_backward
from .seeker import ScoreFile, score_corpus

MODES = ("full", "random", "seek")
ADAM_BETA1, ADAM_BETA2, ADAM_EPS = 0.9, 0.999, 1e-8


@dataclass
class TrainConfig:
    mode: str = "full"
    ratio: float = 0.1
    alpha: float = 5.0
    beta: float = 5.0
    lr_max: float = 4e-4
    warmup_steps: int = 100
    weight_decay: float = 0.01
    accum_steps: int = 32
    epochs: int = 1
    seeds: list[int] = field(default_factory=lambda: [0])
    rescore_interval: int = 0
    adapter: bool = False
    adapter_targets: str = "ff"
    adapter_rank: int = 8
    adapter_alpha: float = 16.0
    adapter_dropout: float = 0.05
    loss_on: str = "all"
    shuffle: bool = True

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not 0 < self.ratio <= 1:
            raise ValueError(f"ratio must lie in (0, 1], got {self.ratio}")
        if self.accum_steps < 1 or self.epochs < 1:
            raise ValueError("accum_steps and epochs must be >= 1")
        if self.loss_on not in ("all", "response"):
            raise ValueError("loss_on must be 'all' or 'response'")

    def total_steps(self, n_instances: int) -> int:
        return math.ceil(n_instances * self.epochs / self.accum_steps)


@dataclass
class StepRecord:
    step: int
    lr: float
    loss: float
    cached_scalars: int
    predicted_scalars: int


@dataclass
class TrainRun:
    config: TrainConfig
    seed: int
    records: list[StepRecord]
    params: Parameters
    adapters: object = None
    memory: MemoryReport = field(default_factory=MemoryReport)
    train_loss: float | None = None
    eval_loss: float | None = None


def cosine_lr(step: int, config: TrainConfig, total_steps: int) -> float:
    """Linear warmup to ``lr_max``, then half-cosine decay to zero at ``total_steps``."""
    if not 0 <= step < total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps})")
    w = config.warmup_steps
    if step < w:
        return config.lr_max * step / w
    span = total_steps - w
    return config.lr_max * 0.5 * (1.0 + math.cos(math.pi * (step - w) / span))


@dataclass
class AdamState:
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState, lr: float, weight_decay: float = 0.0,
              no_decay=frozenset()):
    """One AdamW update, in place.  Decay is decoupled and applied before the moment update."""
    state.t += 1
    c1 = 1.0 - ADAM_BETA1**state.t
    c2 = 1.0 - ADAM_BETA2**state.t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"{name}: grad shape {g.shape} != param shape {p.shape}")
        if weight_decay and name not in no_decay:
            p -= lr * weight_decay * p
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)
    return params, state


def eval_loss(params: Parameters, corpus: list[EncodedInstance], adapters=None, loss_on: str = "all") -> float:
    """Mean full-forward cross-entropy over ``corpus`` (no gradients, no ditching)."""
    if not corpus:
        raise ValueError("evaluation split is empty")
    return float(np.mean([loss_only(params, inst.ids, instance_targets(inst, loss_on), adapters) for inst in corpus]))


def _no_decay(names):
    return frozenset(n for n in names if not n.endswith(("wq", "wk", "wv", "wo", "w1", "w2", "emb", "head")))


def _check_scores(scores: ScoreFile, corpus):
    by_id = scores.by_id()
    missing = [inst.id for inst in corpus if inst.id not in by_id]
    if missing:
        raise ValueError(f"score file lacks instances: {missing[:5]}{'...' if len(missing) > 5 else ''}")
    wrong = [inst.id for inst in corpus if by_id[inst.id].n != inst.n]
    if wrong:
        raise ValueError(f"score lengths differ from corpus for instances: {wrong[:5]}")
    return by_id


def train(params: Parameters, corpus: list[EncodedInstance], config: TrainConfig, scores: ScoreFile | None = None,
          *, seed: int | None = None, eval_corpus: list[EncodedInstance] | None = None,
          adapters=None) -> TrainRun:
    """Run one training job; ``params`` is not modified."""
    if not corpus:
        raise ValueError("training corpus is empty")
    seed = config.seeds[0] if seed is None else seed
    by_id = None
    if config.mode == "seek":
        if scores is None:
            raise ValueError("mode=seek needs a score file")
        by_id = _check_scores(scores, corpus)
    too_long = [inst.id for inst in corpus if inst.n > params.config.max_seq]
    if too_long:
        raise ValueError(f"instances exceed max_seq: {too_long[:5]}")
    params = params.copy()
    if config.adapter and adapters is None:
        adapters = attach(params, config.adapter_targets,
                          AdapterConfig(config.adapter_rank, config.adapter_alpha, config.adapter_dropout, seed)).adapters
    elif adapters is not None:
        adapters = adapters.copy()
    if adapters is not None:
        trainable = {}
        for name, a in adapters.items():
            trainable[name + ".down"] = a.down
            trainable[name + ".up"] = a.up
        no_decay = frozenset()
    else:
        trainable = params.tensors
        no_decay = _no_decay(trainable)
    adapter_kw = dict(adapter_targets=list(adapters.adapters) if adapters is not None else (),
                      adapter_rank=config.adapter_rank if adapters is not None else 0,
                      frozen=adapters is not None)
    if adapters is not None and len(adapters):
        adapter_kw["adapter_rank"] = next(iter(adapters.adapters.values())).rank

    order_rng = np.random.default_rng([seed, 1])
    mask_rng = np.random.default_rng([seed, 2])
    total = config.total_steps(len(corpus))
    if config.warmup_steps >= total:
        raise ValueError(f"warmup_steps={config.warmup_steps} must be < total steps {total}")
    state = AdamState()
    tracker = MemoryTracker()
    records: list[StepRecord] = []
    acc = {k: np.zeros_like(v) for k, v in trainable.items()}
    win_losses, win_cached, win_pred = [], [], []
    seen = 0
    step = 0
    for epoch in range(config.epochs):
        order = order_rng.permutation(len(corpus)) if config.shuffle else np.arange(len(corpus))
        for idx in order:
            inst = corpus[idx]
            n = inst.n
            targets = instance_targets(inst, config.loss_on)
            dropout_key = seen if adapters is not None else None
            if config.mode == "full":
                mask = SelectionMask.full(n)
            elif config.mode == "random":
                k = selection_size(n, config.ratio)
                mask = SelectionMask(n, np.sort(mask_rng.choice(n, size=k, replace=False)))
            else:
                mask = by_id[inst.id].reweighted(config.alpha, config.beta).mask(config.ratio)
            if config.mode == "full" and adapters is None:
                res = forward_full(params, inst.ids, targets)
                g = backward_full(params, res.cache, inst.ids, targets)
                grads = g.tensors
            elif adapters is None:
                res = forward_split(params, inst.ids, targets, mask)
                grads = backward_ditched(params, res.cache, inst.ids, targets, mask).tensors
            else:
                res = forward_split(params, inst.ids, targets, mask, adapters=adapters, dropout_key=dropout_key)
                _, ag, _ = run_backward(params, res.cache, adapters=adapters, dropout_key=dropout_key)
                grads = {}
                for name, gr in ag.items():
                    grads[name + ".down"] = gr.down
                    grads[name + ".up"] = gr.up
            for k_ in acc:
                acc[k_] += grads[k_]
            win_cached.append(tracker.record(res.cache))
            win_pred.append(sum(estimate_breakdown(params.config, n, mask.k, **adapter_kw).values()))
            win_losses.append(res.loss)
            seen += 1
            last = epoch == config.epochs - 1 and idx == order[-1]
            if len(win_losses) == config.accum_steps or last:
                lr = cosine_lr(step, config, total)
                mean_grads = {k_: a / config.accum_steps for k_, a in acc.items()}
                adam_step(trainable, mean_grads, state, lr, config.weight_decay, no_decay)
                records.append(StepRecord(step, lr, float(np.mean(win_losses)), max(win_cached), max(win_pred)))
                for a in acc.values():
                    a[...] = 0.0
                win_losses, win_cached, win_pred = [], [], []
                step += 1
                if config.mode == "seek" and config.rescore_interval and step % config.rescore_interval == 0:
                    scores = score_corpus(params, corpus, config.alpha, config.beta, loss_on=config.loss_on)
                    by_id = scores.by_id()
    max_n = max(inst.n for inst in corpus)
    memory = tracker.report(full_peak=estimate_full(params.config, 1, max_n, **adapter_kw))
    run = TrainRun(config, seed, records, params, adapters, memory)
    run.train_loss = eval_loss(params, corpus, adapters, config.loss_on)
    if eval_corpus:
        run.eval_loss = eval_loss(params, eval_corpus, adapters, config.loss_on)
    return run


# ---------------------------------------------------------------------------
# metrics files


def config_json(config: TrainConfig) -> str:
    return json.dumps(asdict(config), sort_keys=True)


def format_metrics(run: TrainRun, extra_header: dict | None = None) -> str:
    lines = ["# tokenseek-metrics v1",
             f"# config {config_json(run.config)}",
             f"# seed {run.seed}",
             f"# adam beta1={ADAM_BETA1!r} beta2={ADAM_BETA2!r} eps={ADAM_EPS!r}"]
    for k, v in (extra_header or {}).items():
        lines.append(f"# {k} {v}")
    lines.append("step,lr,loss,cached_scalars")
    lines += [f"{r.step},{r.lr!r},{r.loss!r},{r.cached_scalars}" for r in run.records]
    lines.append(f"# summary train_loss={run.train_loss!r} eval_loss={run.eval_loss!r} "
                 f"peak_scalars={run.memory.peak_scalars} average_scalars={run.memory.average_scalars!r}")
    lines.append("# memory")
    lines += run.memory.lines()
    return "\n".join(lines) + "\n"


def parse_metrics(text: str) -> dict:
    """Read back a metrics file into header, per-step rows, summary and memory lines."""
    out = {"header": {}, "steps": [], "summary": {}, "memory": {}}
    section = "steps"
    for line in text.splitlines():
        if line.startswith("# summary "):
            out["summary"] = dict(kv.split("=", 1) for kv in line[len("# summary "):].split())
        elif line == "# memory":
            section = "memory"
        elif line.startswith("# "):
            key, _, val = line[2:].partition(" ")
            out["header"][key] = val
        elif line.startswith("step,") or not line:
            continue
        elif section == "steps":
            s, lr, loss, cached = line.split(",")
            out["steps"].append((int(s), float(lr), float(loss), int(cached)))
        else:
            k, v = line.split(",")
            out["memory"][k] = float(v)
    return out


# ---------------------------------------------------------------------------
# multi-seed study


@dataclass
class StudyRow:
    mode: str
    ratio: float
    seed: int
    final_eval_loss: float
    final_train_loss: float
    peak_scalars: int
    memory_ratio: float


@dataclass
class StudyAggregate:
    mode: str
    ratio: float
    runs: int
    mean: float
    std: float
    min: float
    max: float
    mean_train_loss: float
    mean_memory_ratio: float


@dataclass
class StudyResult:
    rows: list[StudyRow]
    aggregates: list[StudyAggregate]

    def aggregate(self, mode: str, ratio: float) -> StudyAggregate:
        for a in self.aggregates:
            if a.mode == mode and a.ratio == ratio:
                return a
        raise KeyError((mode, ratio))

    def runs_csv(self) -> str:
        lines = ["mode,r,seed,final_eval_loss"]
        lines += [f"{r.mode},{r.ratio!r},{r.seed},{r.final_eval_loss:.17g}" for r in self.rows]
        return "\n".join(lines) + "\n"

    def aggregate_csv(self) -> str:
        lines = ["mode,r,runs,mean,std,min,max,mean_train_loss,mean_memory_ratio"]
        lines += [f"{a.mode},{a.ratio!r},{a.runs},{a.mean:.17g},{a.std:.17g},{a.min:.17g},{a.max:.17g},"
                  f"{a.mean_train_loss:.17g},{a.mean_memory_ratio:.17g}" for a in self.aggregates]
        return "\n".join(lines) + "\n"

    def table(self) -> str:
        """Ratio x memory x loss table, one line per (mode, ratio)."""
        head = f"{'mode':<8}{'ratio':>7}{'mem ratio':>11}{'eval mean':>11}{'eval std':>10}{'min':>9}{'max':>9}"
        rows = [head, "-" * len(head)]
        for a in self.aggregates:
            rows.append(f"{a.mode:<8}{a.ratio:>7.2f}{a.mean_memory_ratio:>11.4f}{a.mean:>11.5f}{a.std:>10.5f}"
                        f"{a.min:>9.4f}{a.max:>9.4f}")
        return "\n".join(rows)


def stability_study(params: Parameters, corpus, eval_corpus, config: TrainConfig, modes=("random", "seek"),
                    ratios=(0.1, 0.3, 0.5), seeds=(0, 1, 2, 3, 4), scores: ScoreFile | None = None,
                    progress=None) -> StudyResult:
    """Train every (mode, ratio, seed) from the same starting parameters."""
    if len(seeds) < 3:
        raise ValueError("a stability study needs at least 3 seeds")
    if "seek" in modes and scores is None:
        scores = score_corpus(params, corpus, config.alpha, config.beta, loss_on=config.loss_on)
    rows, aggs = [], []
    for mode in modes:
        for r in ratios:
            cfg = TrainConfig(**{**asdict(config), "mode": mode, "ratio": r, "seeds": list(seeds)})
            group = []
            for seed in seeds:
                run = train(params, corpus, cfg, scores, seed=seed, eval_corpus=eval_corpus)
                row = StudyRow(mode, r, seed, run.eval_loss, run.train_loss, run.memory.peak_scalars,
                               run.memory.ratio_vs_full or 1.0)
                group.append(row)
                if progress:
                    progress(row)
            rows += group
            ev = np.array([g.final_eval_loss for g in group])
            aggs.append(StudyAggregate(mode, r, len(group), float(ev.mean()), float(ev.std(ddof=1)),
                                       float(ev.min()), float(ev.max()),
                                       float(np.mean([g.final_train_loss for g in group])),
                                       float(np.mean([g.memory_ratio for g in group]))))
    return StudyResult(rows, aggs)


WEIGHT_GRID = ((1.0, 0.0), (0.0, 1.0), (5.0, 5.0))


def select_weights(params: Parameters, corpus, val_corpus, config: TrainConfig, grid=WEIGHT_GRID,
                   ratio: float | None = None, seed: int = 0):
    """Pick ``(alpha, beta)`` from ``grid`` by seek-mode validation loss after one training run each.

    Returns the best pair (first in grid order on ties) and the loss of every candidate.
    """
    base = score_corpus(params, corpus, 1.0, 1.0, loss_on=config.loss_on)
    losses = {}
    for a, b in grid:
        sf = ScoreFile([s.reweighted(a, b) for s in base.scores], a, b, base.magnitude, base.model_checksum)
        cfg = TrainConfig(**{**asdict(config), "mode": "seek", "alpha": a, "beta": b,
                             "ratio": config.ratio if ratio is None else ratio})
        losses[(a, b)] = train(params, corpus, cfg, sf, seed=seed, eval_corpus=val_corpus).eval_loss
    best = min(grid, key=lambda ab: (losses[ab], grid.index(ab)))
    return best, losses
