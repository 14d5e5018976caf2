"""Finite-difference and stop-gradient checks of every backward path."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .adapters import AdapterConfig, attach
from .ditcher import SelectionMask, backward_ditched, forward_split, selection_size
from .model import ModelConfig, backward_full, forward_full, init_params, loss_only, next_token_targets, run_backward
from .oracle import (central_difference, ditched_objective, fd_param_grads, flat_relative_error, reference_gradients,
                     relative_error)

SIZES = {
    "tiny": (ModelConfig(n_layers=1, hidden=8, n_heads=2, ff_dim=16, vocab=16, max_seq=8), 6),
    "small": (ModelConfig(n_layers=2, hidden=16, n_heads=2, ff_dim=32, vocab=24, max_seq=12), 10),
}
FD_STEP = 1e-5
FD_TOL = 1e-6
ORACLE_TOL = 1e-10
# key biases: with every row differentiable a row softmax is invariant to them, so the
# exact full gradient is zero and a relative comparison measures rounding noise; they get
# an absolute bound there.  Ditching breaks the invariance (constant keys carry no shift)
# unless the selection is a prefix, where selected queries never see a constant key.
STRUCTURAL_ZERO = (".bk",)
ZERO_TOL = 1e-12


@dataclass
class CheckResult:
    name: str
    max_rel_err: float
    tol: float

    @property
    def ok(self) -> bool:
        return self.max_rel_err <= self.tol

    def line(self) -> str:
        return f"{self.name},{self.max_rel_err:.3e},{self.tol:.0e},{'pass' if self.ok else 'FAIL'}"


def _setup(size: str, seed: int):
    if size not in SIZES:
        raise ValueError(f"size must be one of {sorted(SIZES)}")
    cfg, n = SIZES[size]
    cfg = ModelConfig(**{**cfg.__dict__, "seed": seed})
    # larger init than training default so every path carries visible signal
    params = init_params(cfg, init_scale=0.3)
    rng = np.random.default_rng([seed, 99])
    tokens = rng.integers(0, cfg.vocab, size=n)
    targets = next_token_targets(tokens)
    sel = np.sort(rng.choice(n, size=selection_size(n, 0.5), replace=False))
    return params, tokens, targets, SelectionMask(n, sel)


def _max_err(a, b, skip=()) -> float:
    return max(relative_error(a[k], b[k]) for k in a if not k.endswith(tuple(skip)))


def check_structural_zero(grads) -> CheckResult:
    worst = max((float(np.abs(g).max()) for k, g in grads.items() if k.endswith(STRUCTURAL_ZERO)), default=0.0)
    return CheckResult("key_bias_abs", worst, ZERO_TOL)


def check_full(params, tokens, targets, step=FD_STEP) -> list[CheckResult]:
    res = forward_full(params, tokens, targets)
    g = backward_full(params, res.cache, tokens, targets)
    fd = fd_param_grads(lambda p: loss_only(p, tokens, targets), params, step)
    return [CheckResult("full_vs_fd", _max_err(dict(g.items()), dict(fd.items()), STRUCTURAL_ZERO), FD_TOL),
            check_structural_zero(dict(g.items()))]


def check_ditched(params, tokens, targets, mask, step=FD_STEP) -> list[CheckResult]:
    res = forward_split(params, tokens, targets, mask)
    g = dict(backward_ditched(params, res.cache, tokens, targets, mask).items())
    frozen = params.copy()
    fd = fd_param_grads(lambda p: ditched_objective(p, frozen, tokens, targets, mask), params, step)
    _, ref, _ = reference_gradients(params, tokens, targets, mask)
    prefix = np.array_equal(mask.selected, np.arange(mask.k))
    out = [CheckResult("ditched_vs_fd", _max_err(g, dict(fd.items()), STRUCTURAL_ZERO if prefix else ()), FD_TOL),
           CheckResult("ditched_vs_oracle", flat_relative_error(g, dict(ref.items())), ORACLE_TOL)]
    if prefix:
        out.append(check_structural_zero(g))
    return out


def check_adapted(params, tokens, targets, mask, seed=0, step=FD_STEP) -> list[CheckResult]:
    ap = attach(params, ("all",), AdapterConfig(rank=2, alpha=4.0, dropout=0.25, seed=seed))
    # a nonzero up-projection so gradients w.r.t. down are not trivially zero
    rng = np.random.default_rng([seed, 7])
    for _, a in ap.adapters.items():
        a.up[...] = rng.standard_normal(a.up.shape) * 0.3
    key = 3
    res = forward_split(params, tokens, targets, mask, adapters=ap.adapters, dropout_key=key)
    _, ag, _ = run_backward(params, res.cache, adapters=ap.adapters, dropout_key=key)
    frozen = ap.adapters.copy()
    probe = ap.adapters.copy()
    fd_err = 0.0
    _, _, ref = reference_gradients(params, tokens, targets, mask, adapters=ap.adapters, dropout_key=key)
    mine = {f"{n}.{part}": getattr(ag[n], part) for n in ag for part in ("down", "up")}
    theirs = {f"{n}.{part}": ref[n][i] for n in ref for i, part in enumerate(("down", "up"))}
    or_err = flat_relative_error(mine, theirs)
    for name, a in probe.items():
        def f():
            return ditched_objective(params, params, tokens, targets, mask, adapters=probe,
                                     frozen_adapters=frozen, dropout_key=key)
        d_down = central_difference(f, a.down, step)
        d_up = central_difference(f, a.up, step)
        fd_err = max(fd_err, relative_error(ag[name].down, d_down), relative_error(ag[name].up, d_up))
    return [CheckResult("adapted_vs_fd", fd_err, FD_TOL), CheckResult("adapted_vs_oracle", or_err, ORACLE_TOL)]


def run_gradcheck(size: str = "tiny", seed: int = 0) -> list[CheckResult]:
    params, tokens, targets, mask = _setup(size, seed)
    out = check_full(params, tokens, targets)
    out += check_ditched(params, tokens, targets, mask)
    out += check_adapted(params, tokens, targets, mask, seed)
    return out
