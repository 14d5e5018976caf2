"""Acceptance criteria 1-10.

Each test records ``(passed, detail)`` in ``conftest.ACCEPTANCE``; the summary
hook prints one line per criterion.  Run as a script for the same lines
without pytest: ``python tests/test_acceptance.py``.
"""
import shutil
import sys
import time
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))
from conftest import ACCEPTANCE, FIXTURES  # noqa: E402

from tokenseek.adapters import AdapterConfig, attach  # noqa: E402
from tokenseek.cli import main as cli_main  # noqa: E402
from tokenseek.data import encode_corpus, load_jsonl, render_alpaca, toy_records  # noqa: E402
from tokenseek.ditcher import SelectionMask, backward_ditched, forward_split, selection_size  # noqa: E402
from tokenseek.gradcheck import run_gradcheck  # noqa: E402
from tokenseek.memacct import count_cache, estimate_ditched, leading_terms, ratio_vs_full  # noqa: E402
from tokenseek.model import (ModelConfig, backward_full, forward_full, init_params, next_token_targets,  # noqa: E402
                             run_backward)
from tokenseek.oracle import flat_relative_error, reference_gradients, relative_error  # noqa: E402
from tokenseek.seeker import combine_scores, context_scores, score_corpus, select_tokens  # noqa: E402
from tokenseek.trainer import TrainConfig, select_weights, stability_study, train  # noqa: E402


def record(n: int, ok: bool, detail: str) -> None:
    ACCEPTANCE[n] = (bool(ok), detail)
    print(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")


# ---------------------------------------------------------------------------
# toy study shared by criteria 7 and 8

STUDY_SEQ = 64
STUDY_RATIOS = (0.1, 0.3, 0.5)
STUDY_SEEDS = (0, 1, 2, 3, 4)


def _study_config(**kw) -> TrainConfig:
    base = dict(lr_max=1e-2, warmup_steps=2, accum_steps=8, weight_decay=0.01, loss_on="response")
    return TrainConfig(**{**base, **kw})


def build_toy_study():
    """Base model pretrained on a copy task, then fine-tuned on reversal."""
    cfg = ModelConfig(n_layers=2, hidden=16, n_heads=2, ff_dim=32, max_seq=STUDY_SEQ, seed=0)
    pre = encode_corpus(toy_records("copy", 256, seed=7, prefix="pre-"), STUDY_SEQ)
    base = train(init_params(cfg), pre, _study_config(mode="full", loss_on="all"), seed=0).params
    split = {name: encode_corpus(toy_records("reverse", count, seed=seed), STUDY_SEQ)
             for name, count, seed in (("train", 256, 0), ("val", 64, 2), ("eval", 64, 1))}
    return base, split


@pytest.fixture(scope="module")
def toy_study():
    return build_toy_study()


# ---------------------------------------------------------------------------


def _tiny_triple(rng):
    L = int(rng.integers(1, 3))
    nh = int(rng.choice([1, 2, 4]))
    H = nh * int(rng.integers(1, 16 // nh + 1))
    cfg = ModelConfig(n_layers=L, hidden=H, n_heads=nh, ff_dim=2 * H, vocab=32, max_seq=16,
                      seed=int(rng.integers(2**31)))
    n = int(rng.integers(1, 17))
    tokens = rng.integers(0, 32, n)
    k = int(rng.integers(1, n + 1))
    mask = SelectionMask(n, np.sort(rng.choice(n, k, replace=False)))
    return init_params(cfg, 0.3), tokens, next_token_targets(tokens), mask


def test_criterion_1_forward_invariance():
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(200):
        p, tokens, targets, mask = _tiny_triple(rng)
        a = forward_full(p, tokens, targets)
        b = forward_split(p, tokens, targets, mask)
        worst = max(worst, relative_error(np.array([a.loss]), np.array([b.loss])),
                    relative_error(a.logits, b.logits), relative_error(a.final_attn, b.final_attn))
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-12 and elapsed < 10
    record(1, ok, f"200 triples, worst rel err {worst:.2e} (tol 1e-12), {elapsed:.2f}s (limit 10s)")
    assert ok


def test_criterion_2_degenerate_ratio():
    rng = np.random.default_rng(7)
    worst_grad = 0.0
    for _ in range(20):
        p, tokens, targets, _ = _tiny_triple(rng)
        full = SelectionMask.full(len(tokens))
        gf = backward_full(p, forward_full(p, tokens, targets).cache)
        gd = backward_ditched(p, forward_split(p, tokens, targets, full).cache, tokens, targets, full)
        worst_grad = max(worst_grad, max(relative_error(gd[k], gf[k]) for k in gf))

    cfg = ModelConfig(n_layers=2, hidden=16, n_heads=2, ff_dim=32, max_seq=48, seed=1)
    params = init_params(cfg)
    corpus = encode_corpus(toy_records("reverse", 24, seed=5), 48)
    tc = dict(lr_max=1e-2, warmup_steps=1, accum_steps=4)
    full_run = train(params, corpus, TrainConfig(mode="full", **tc), seed=0)
    seek_run = train(params, corpus, TrainConfig(mode="seek", ratio=1.0, **tc), score_corpus(params, corpus), seed=0)
    worst_param = max(relative_error(seek_run.params[k], v) for k, v in full_run.params.items())
    ok = worst_grad <= 1e-12 and worst_param <= 1e-12
    record(2, ok, f"r=1 gradient rel err {worst_grad:.2e}; seek-vs-full final params {worst_param:.2e} (tol 1e-12)")
    assert ok


def test_criterion_3_gradient_correctness():
    results = []
    for seed in range(6):
        results += run_gradcheck("tiny", seed)
    results += run_gradcheck("small", 0)  # two layers; about 50s of finite differences
    fd_worst = {name: max(r.max_rel_err for r in results if r.name == name)
                for name in ("full_vs_fd", "ditched_vs_fd", "adapted_vs_fd")}
    suite_ok = all(r.ok for r in results)

    rng = np.random.default_rng(11)
    oracle_worst = 0.0
    for i in range(200):
        cfg = ModelConfig(n_layers=int(rng.integers(1, 3)), hidden=8, n_heads=2, ff_dim=16, vocab=24, max_seq=12,
                          seed=i)
        p = init_params(cfg, 0.3)
        n = int(rng.integers(2, 13))
        tokens = rng.integers(0, 24, n)
        targets = next_token_targets(tokens)
        mask = SelectionMask(n, np.sort(rng.choice(n, int(rng.integers(1, n + 1)), replace=False)))
        if i % 4 == 3:
            ap = attach(p, ("all",), AdapterConfig(rank=2, alpha=4.0, dropout=0.2, seed=i))
            for _, a in ap.adapters.items():
                a.up[...] = rng.standard_normal(a.up.shape) * 0.2
            res = forward_split(p, tokens, targets, mask, adapters=ap.adapters, dropout_key=i)
            _, ag, _ = run_backward(p, res.cache, adapters=ap.adapters, dropout_key=i)
            _, _, ref = reference_gradients(p, tokens, targets, mask, adapters=ap.adapters, dropout_key=i)
            got = {f"{k}.{j}": v for k, g in ag.items() for j, v in enumerate((g.down, g.up))}
            want = {f"{k}.{j}": v for k, pair in ref.items() for j, v in enumerate(pair)}
        else:
            res = forward_split(p, tokens, targets, mask)
            got = dict(backward_ditched(p, res.cache, tokens, targets, mask).items())
            want = dict(reference_gradients(p, tokens, targets, mask)[1].items())
        oracle_worst = max(oracle_worst, flat_relative_error(got, want))
    ok = suite_ok and oracle_worst <= 1e-10
    fd_txt = ", ".join(f"{k} {v:.2e}" for k, v in fd_worst.items())
    record(3, ok, f"FD (tol 1e-6): {fd_txt}; oracle over 200 masks {oracle_worst:.2e} (tol 1e-10)")
    assert ok


def test_criterion_4_memory_exactness():
    mismatches = 0
    lines = []
    for L in (1, 2):
        cfg = ModelConfig(n_layers=L, hidden=16, n_heads=2, ff_dim=32, max_seq=32, seed=L)
        p = init_params(cfg)
        rng = np.random.default_rng(L)
        for s in (4, 8, 16, 32):
            tokens = rng.integers(0, cfg.vocab, s)
            targets = next_token_targets(tokens)
            for r in (0.1, 0.25, 0.5, 1.0):
                k = selection_size(s, r)
                mask = SelectionMask(s, np.sort(rng.choice(s, k, replace=False)))
                measured = count_cache(forward_split(p, tokens, targets, mask).cache).total_scalars
                mismatches += measured != estimate_ditched(cfg, 1, s, r)
            rb = ratio_vs_full(cfg, s, 0.1)
            lines.append(f"L={L} s={s}: ratio {rb.ratio:.4f} = selected {rb.selected_fraction:.4f}"
                         f" + kv {rb.kv_overhead_fraction:.4f}")
    # the literal [0.10, 0.10 + overhead] bound needs k = 0.1 s exactly
    bound_ok = True
    cfg = ModelConfig(n_layers=2, hidden=16, n_heads=2, ff_dim=32, max_seq=32)
    for s in (10, 20, 30):
        rb = ratio_vs_full(cfg, s, 0.1)
        bound_ok &= 0.10 - 1e-15 <= rb.ratio <= 0.10 + rb.kv_overhead_fraction + 1e-15
        lines.append(f"L=2 s={s}: ratio {rb.ratio:.4f} in [0.10, {0.10 + rb.kv_overhead_fraction:.4f}]")
    print("\n".join(lines))
    ok = mismatches == 0 and bound_ok
    s20 = ratio_vs_full(cfg, 20, 0.1)
    record(4, ok, f"{mismatches} mismatches over 32 grid points; s=20 r=0.1 ratio {s20.ratio:.4f} ="
                  f" 0.1000 + kv overhead {s20.kv_overhead_fraction:.4f}")
    assert ok


def test_criterion_5_analytic_constants():
    lt = leading_terms(1, 128, 4096, 7168)
    ok = lt["total"] == 2_176_843_776 and lt["weights"] == 51_380_224 and round(lt["ratio"], 1) == 42.4
    record(5, ok, f"leading terms {lt['total']:,} vs H^2 {lt['weights']:,}, ratio {lt['ratio']:.3f}")
    assert ok


def _round_half_up(x: Decimal) -> int:
    return int(x.quantize(Decimal(1), rounding=ROUND_HALF_UP))


def test_criterion_6_scoring_invariants():
    cfg = ModelConfig(n_layers=2, hidden=16, n_heads=2, ff_dim=32, max_seq=STUDY_SEQ, seed=3)
    p = init_params(cfg, 0.3)
    fixture = encode_corpus(load_jsonl(FIXTURES / "fixture_corpus.jsonl"), STUDY_SEQ)
    sum_err = max(abs(context_scores(forward_full(p, i.ids, next_token_targets(i.ids)).final_attn).sum() - i.n)
                  for i in fixture)

    rng = np.random.default_rng(0)
    k_bad = 0
    for n in range(1, 65):
        for step in range(1, 101):
            r = step / 100
            expect = max(1, _round_half_up(Decimal(step) * n / 100))
            got = select_tokens(rng.standard_normal(n), r)
            k_bad += got.k != expect or selection_size(n, r) != expect

    scale_bad = 0
    for _ in range(1000):
        n = int(rng.integers(1, 65))
        i1 = rng.random(n) * 3
        i2 = rng.standard_normal(n)
        a, b = rng.random() * 5, rng.random() * 5
        c = float(2.0 ** rng.integers(-3, 4))  # power-of-two scales keep the fused values exact
        r = float(rng.choice([0.1, 0.25, 0.5]))
        base = select_tokens(combine_scores(i1, i2, a, b), r).selected
        scaled = select_tokens(combine_scores(i1, i2, c * a, c * b), r).selected
        scale_bad += not np.array_equal(base, scaled)
    ok = sum_err <= 1e-9 and k_bad == 0 and scale_bad == 0
    record(6, ok, f"max |sum i1 - n| {sum_err:.1e} over {len(fixture)} instances; k-rule violations {k_bad}/6400;"
                  f" scaling changed {scale_bad}/1000 masks")
    assert ok


@pytest.mark.slow
def test_criterion_7_stability(toy_study):
    base, split = toy_study
    t0 = time.perf_counter()
    config = _study_config()
    (alpha, beta), val = select_weights(base, split["train"], split["val"], config, ratio=0.1)
    config = _study_config(alpha=alpha, beta=beta)
    res = stability_study(base, split["train"], split["eval"], config, ratios=STUDY_RATIOS, seeds=STUDY_SEEDS)
    elapsed = time.perf_counter() - t0
    print("validation losses by (alpha, beta):", {k: round(v, 5) for k, v in val.items()})
    print(res.runs_csv())
    print(res.table())
    mean_ok = all(res.aggregate("seek", r).mean <= res.aggregate("random", r).mean for r in STUDY_RATIOS)
    std_wins = sum(res.aggregate("seek", r).std <= res.aggregate("random", r).std for r in STUDY_RATIOS)
    ok = mean_ok and std_wins >= 2 and elapsed < 15 * 60
    pairs = "; ".join(f"r={r}: seek {res.aggregate('seek', r).mean:.4f}/{res.aggregate('seek', r).std:.4f}"
                      f" random {res.aggregate('random', r).mean:.4f}/{res.aggregate('random', r).std:.4f}"
                      for r in STUDY_RATIOS)
    record(7, ok, f"(alpha, beta)=({alpha:g}, {beta:g}); mean/std {pairs}; std wins {std_wins}/3; {elapsed:.0f}s")
    assert ok


@pytest.mark.slow
def test_criterion_8_gradient_pattern(toy_study):
    base, split = toy_study
    config = _study_config(mode="seek", ratio=0.1, alpha=0.0, beta=1.0)
    run = train(base, split["train"], config, score_corpus(base, split["train"], 0.0, 1.0, loss_on="response"),
                seed=0)
    fixture = encode_corpus(load_jsonl(FIXTURES / "fixture_corpus.jsonl"), STUDY_SEQ)
    # the criterion uses the training objective (response tokens only); the all-position
    # count is reported alongside because the template prompt then dominates
    counts = {}
    for loss_on in ("response", "all"):
        scores = score_corpus(run.params, fixture, 0.0, 1.0, loss_on=loss_on)
        counts[loss_on] = sum(s.i2[inst.response_start:].mean() > s.i2[:inst.response_start].mean()
                              for inst, s in zip(fixture, scores.scores))
    frac = counts["response"] / len(fixture)
    ok = frac >= 0.70
    record(8, ok, f"response mean I2 > prompt mean I2 on {counts['response']}/{len(fixture)} = {frac:.2f}"
                  f" (need >= 0.70); with all-position targets {counts['all']}/{len(fixture)}")
    assert ok


def _cli_session(d: Path) -> dict:
    corpus = FIXTURES / "fixture_corpus.jsonl"
    assert cli_main(["init", str(d / "m.bin"), "--max-seq", "64", "--seed", "3"]) == 0
    assert cli_main(["toy-data", str(d / "t.jsonl"), "--count", "16", "--seed", "4"]) == 0
    assert cli_main(["score", str(d / "m.bin"), str(d / "t.jsonl"), str(d / "s.csv"), "--loss-on", "response"]) == 0
    assert cli_main(["score", str(d / "m.bin"), str(corpus), str(d / "fixture.csv")]) == 0
    for mode in ("full", "random", "seek"):
        flags = ["--mode", mode, "--lr", "1e-2", "--warmup", "1", "--accum", "4", "--out", str(d / mode)]
        if mode != "full":
            flags += ["--ratio", "0.3"]
        if mode == "seek":
            flags += ["--scores", str(d / "s.csv"), "--adapter"]
        assert cli_main(["train", str(d / "m.bin"), str(d / "t.jsonl"), *flags]) == 0
    assert cli_main(["ablate", str(d / "m.bin"), str(d / "t.jsonl"), "--ratios", "0.5", "--seeds", "0,1,2",
                     "--lr", "1e-2", "--warmup", "1", "--accum", "4", "--out", str(d / "ablate")]) == 0
    return {p.relative_to(d): p.read_bytes() for p in sorted(d.rglob("*")) if p.is_file()}


def test_criterion_9_determinism(tmp_path):
    first = _cli_session(tmp_path)
    shutil.rmtree(tmp_path)
    tmp_path.mkdir()
    second = _cli_session(tmp_path)
    differ = sorted(str(k) for k in first.keys() | second.keys() if first.get(k) != second.get(k))
    ok = not differ
    record(9, ok, f"{len(first)} output files rewritten with identical flags; differing: {differ or 'none'}")
    assert ok


def test_criterion_10_template_fidelity():
    rec = load_jsonl(FIXTURES / "fixture_record.jsonl").records[0]
    got = render_alpaca(rec).encode("utf-8")
    golden = (FIXTURES / "alpaca_golden.txt").read_bytes()
    record(10, got == golden, f"{len(got)} rendered bytes vs {len(golden)} golden bytes, equal={got == golden}")
    assert got == golden


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-q", "-s"]))
