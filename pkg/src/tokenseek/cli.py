"""Command-line entry point: ``tokenseek <command> ...``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 invariant violation.
Settings resolve as flags > ``--config-file`` (``key=value`` lines) > defaults.
``TOKENSEEK_OUT`` sets the default output directory.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .data import encode_corpus, load_jsonl, render_alpaca, toy_records, truncate, write_jsonl
from .ditcher import selection_size
from .gradcheck import SIZES, run_gradcheck
from .memacct import estimate_breakdown, estimate_full, leading_attention_ditched, leading_terms, ratio_vs_full
from .model import ModelConfig, init_params, load_checkpoint, save_checkpoint
from .seeker import combine_scores, read_score_file, score_corpus, write_score_file
from .trainer import TrainConfig, format_metrics, parse_metrics, stability_study, train

log = logging.getLogger("tokenseek")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INVARIANT = 0, 1, 2, 3
OUT_ENV = "TOKENSEEK_OUT"


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _floats(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _ints(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _out_dir(value: str | None, fallback: str) -> Path:
    base = value or os.path.join(os.environ.get(OUT_ENV, "."), fallback)
    path = Path(base)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _effective(args) -> dict:
    # the output location is not part of the experiment; leaving it out keeps reruns byte-identical
    skip = {"func", "config_file", "verbose", "out"}
    return {k: v for k, v in sorted(vars(args).items()) if k not in skip}


def _config_line(args) -> str:
    return json.dumps(_effective(args), sort_keys=True, default=str)


def _load_model(path):
    if not Path(path).is_file():
        raise DataError(f"checkpoint not found: {path}")
    try:
        return load_checkpoint(path)
    except (ValueError, OSError) as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc


def _load_corpus(path, max_seq):
    if not Path(path).is_file():
        raise DataError(f"corpus not found: {path}")
    corpus = load_jsonl(path)
    for lineno, msg in corpus.errors:
        log.warning("%s:%d skipped: %s", path, lineno, msg)
    if not len(corpus):
        raise DataError(f"corpus {path} has no valid records")
    try:
        return encode_corpus(corpus, max_seq)
    except ValueError as exc:
        raise DataError(str(exc)) from exc


def _write(path: Path, text: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


# ---------------------------------------------------------------------------
# commands


def cmd_init(args) -> int:
    cfg = ModelConfig(n_layers=args.layers, hidden=args.hidden, n_heads=args.heads, ff_dim=args.ff,
                      max_seq=args.max_seq, seed=args.seed)
    params = init_params(cfg)
    save_checkpoint(args.out, params)
    print(f"wrote {args.out}: {params.count()} parameters, checksum {params.checksum()}")
    return EXIT_OK


def cmd_toy_data(args) -> int:
    recs = toy_records(args.task, args.count, args.seed, prefix=args.prefix)
    write_jsonl(args.out, recs)
    print(f"wrote {len(recs)} {args.task} records to {args.out}")
    return EXIT_OK


def cmd_score(args) -> int:
    combine_scores([1.0], [1.0], args.alpha, args.beta)
    params, _ = _load_model(args.model)
    corpus = _load_corpus(args.corpus, None)
    sf = score_corpus(params, corpus, args.alpha, args.beta, magnitude=not args.signed, loss_on=args.loss_on)
    write_score_file(args.out, sf, _config_line(args))
    lines = ["instance_id,n,top_0.1,top_0.5"]
    for s in sf.scores:
        lines.append(f"{s.instance_id},{s.n},{' '.join(map(str, s.mask(0.1).selected))},"
                     f"{' '.join(map(str, s.mask(0.5).selected))}")
    summary = "\n".join(lines) + "\n"
    _write(Path(str(args.out) + ".summary.csv"), summary)
    sys.stdout.write(summary)
    return EXIT_OK


def _train_config(args, mode=None, ratio=None) -> TrainConfig:
    return TrainConfig(mode=mode or args.mode, ratio=args.ratio if ratio is None else ratio,
                       alpha=args.alpha, beta=args.beta, lr_max=args.lr, warmup_steps=args.warmup,
                       weight_decay=args.weight_decay, accum_steps=args.accum, epochs=args.epochs,
                       seeds=list(args.seeds) if hasattr(args, "seeds") else [args.seed],
                       adapter=getattr(args, "adapter", False), adapter_rank=args.rank,
                       loss_on=args.loss_on)


def cmd_train(args) -> int:
    if args.mode == "seek" and not args.scores:
        raise UsageError("--mode seek needs --scores; create one with `tokenseek score MODEL CORPUS OUT`")
    if args.mode == "full":
        if args.ratio is not None and args.ratio != 1.0:
            log.warning("--mode full ignores --ratio %s", args.ratio)
        args.ratio = 1.0
    elif args.ratio is None:
        args.ratio = 0.1
    params, _ = _load_model(args.model)
    corpus = _load_corpus(args.corpus, params.config.max_seq)
    eval_corpus = _load_corpus(args.eval, params.config.max_seq) if args.eval else None
    scores = None
    if args.scores:
        if not Path(args.scores).is_file():
            raise DataError(f"score file not found: {args.scores}")
        scores = read_score_file(args.scores, args.alpha, args.beta)
    cfg = _train_config(args)
    try:
        run = train(params, corpus, cfg, scores, seed=args.seed, eval_corpus=eval_corpus)
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    out = _out_dir(args.out, "run")
    save_checkpoint(out / "checkpoint.bin", run.params, run.adapters)
    _write(out / "metrics.csv", format_metrics(run, {"cli": _config_line(args), "model": params.checksum()}))
    _write(out / "memory.csv", "step,measured_peak,analytic_peak\n" + "".join(
        f"{r.step},{r.cached_scalars},{r.predicted_scalars}\n" for r in run.records))
    _write(out / "memory.txt", run.memory.table() + "\n")
    print(f"{len(run.records)} steps; train_loss={run.train_loss:.6f}"
          + (f" eval_loss={run.eval_loss:.6f}" if run.eval_loss is not None else ""))
    print(run.memory.table())
    return EXIT_OK


def cmd_ablate(args) -> int:
    params, _ = _load_model(args.model)
    corpus = _load_corpus(args.corpus, params.config.max_seq)
    eval_corpus = _load_corpus(args.eval, params.config.max_seq) if args.eval else corpus
    if len(args.seeds) < 3:
        raise UsageError("--seeds needs at least 3 values")
    cfg = _train_config(args, mode=args.modes[0], ratio=args.ratios[0])
    scores = None
    if args.scores:
        scores = read_score_file(args.scores, args.alpha, args.beta)
    res = stability_study(params, corpus, eval_corpus, cfg, modes=args.modes, ratios=args.ratios,
                          seeds=args.seeds, scores=scores)
    out = _out_dir(args.out, "ablate")
    header = f"# config {_config_line(args)}\n"
    _write(out / "runs.csv", header + res.runs_csv())
    _write(out / "aggregate.csv", header + res.aggregate_csv())
    _write(out / "table.txt", res.table() + "\n")
    print(res.table())
    return EXIT_OK


def _parse_shape(text: str) -> tuple[ModelConfig, int]:
    try:
        L, H, nh, ff, V, s = (int(x) for x in text.split(","))
    except ValueError:
        raise UsageError(f"--config expects L,H,n_h,ff,V,s; got {text!r}") from None
    return ModelConfig(n_layers=L, hidden=H, n_heads=nh, ff_dim=ff, vocab=V, max_seq=s), s


def cmd_memreport(args) -> int:
    if bool(args.config) == bool(args.run):
        raise UsageError("memreport needs exactly one of --config or --run")
    if args.run:
        run = Path(args.run)
        if not (run / "memory.csv").is_file():
            raise DataError(f"{run} is not a run directory (memory.csv missing)")
        rows = np.loadtxt(run / "memory.csv", delimiter=",", skiprows=1, dtype=np.int64, ndmin=2)
        metrics = parse_metrics((run / "metrics.csv").read_text())
        measured, analytic = int(rows[:, 1].max()), int(rows[:, 2].max())
        print(f"run {run}: mode={json.loads(metrics['header']['config'])['mode']}")
        print(f"measured peak scalars   {measured}")
        print(f"measured average        {metrics['memory'].get('average', float('nan'))!r}")
        print(f"analytic peak scalars   {analytic}")
        ratio = measured / analytic
        print(f"measured / analytic     {ratio:.6f}")
        mismatched = int((rows[:, 1] != rows[:, 2]).sum())
        if mismatched:
            print(f"{mismatched} steps differ from the analytic count", file=sys.stderr)
            return EXIT_INVARIANT
        return EXIT_OK
    cfg, s = _parse_shape(args.config)
    print(f"# config L={cfg.n_layers} H={cfg.hidden} n_h={cfg.n_heads} ff={cfg.ff_dim} V={cfg.vocab} s={s} B={args.batch}")
    lt = leading_terms(args.batch, cfg.n_heads, s, cfg.hidden)
    print(f"leading terms per layer: attention={lt['attention']} hidden={lt['hidden']} total={lt['total']} "
          f"weights(H^2)={lt['weights']} ratio={lt['ratio']:.3f}")
    full = estimate_full(cfg, args.batch, s)
    print("r,k,leading_attention,attention_fraction,cached_scalars,ratio_vs_full,selected_fraction,kv_overhead_fraction")
    for r in args.ratios:
        la = leading_attention_ditched(args.batch, cfg.n_heads, s, r)
        rb = ratio_vs_full(cfg, s, r)
        total = args.batch * sum(estimate_breakdown(cfg, s, selection_size(s, r)).values())
        print(f"{r!r},{rb.k},{la['attention']},{la['fraction']:.8f},{total},{rb.ratio:.8f},"
              f"{rb.selected_fraction:.8f},{rb.kv_overhead_fraction:.8f}")
    print(f"# full cached scalars {full}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    results = run_gradcheck(args.size, args.seed)
    print("check,max_rel_err,tol,status")
    for r in results:
        print(r.line())
    return EXIT_OK if all(r.ok for r in results) else EXIT_INVARIANT


def cmd_inspect(args) -> int:
    if not Path(args.scores).is_file():
        raise DataError(f"score file not found: {args.scores}")
    sf = read_score_file(args.scores)
    by_id = sf.by_id()
    if args.instance_id not in by_id:
        raise DataError(f"unknown instance id {args.instance_id!r}")
    s = by_id[args.instance_id]
    mask = s.mask(args.ratio)
    chosen = mask.as_bool()
    ids = None
    if args.corpus:
        enc = {e.id: e for e in _load_corpus(args.corpus, None)}
        inst = enc.get(args.instance_id)
        if inst is not None and inst.n >= s.n:
            ids = truncate(inst, s.n).ids
    pieces = []
    for j in range(s.n):
        tok = _token_text(ids[j]) if ids is not None else f"<{j}>"
        pieces.append(f"[{tok}]" if chosen[j] else tok)
    print(f"# instance {s.instance_id}: {mask.k} of {s.n} tokens selected at r={args.ratio!r} ([] marks selected)")
    print("".join(pieces))
    print("token_index,token,selected,i1,i2,fused")
    for j in range(s.n):
        tok = _token_text(ids[j]) if ids is not None else ""
        print(f"{j},{json.dumps(tok)},{int(chosen[j])},{s.i1[j]:.17g},{s.i2[j]:.17g},{s.fused[j]:.17g}")
    return EXIT_OK


def _token_text(t) -> str:
    t = int(t)
    if t >= 256:
        return {256: "<bos>", 257: "<eos>", 258: "<pad>"}[t]
    ch = chr(t)
    return ch if ch.isprintable() or ch == "\n" else f"\\x{t:02x}"


def cmd_render(args) -> int:
    corpus = load_jsonl(args.corpus)
    for rec in corpus:
        if args.id is None or rec.id == args.id:
            sys.stdout.write(render_alpaca(rec) + "\n")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def _train_flags(p, with_mode=True):
    if with_mode:
        p.add_argument("--mode", choices=("full", "random", "seek"), default="full")
        p.add_argument("--ratio", type=float, help="fraction of tokens kept (default 0.1)")
        p.add_argument("--scores", help="score file (required for --mode seek)")
        p.add_argument("--adapter", action="store_true", help="train low-rank adapters on the FF layers only")
        p.add_argument("--seed", type=int, default=0)
    p.add_argument("--eval", help="held-out corpus for the final eval loss")
    p.add_argument("--alpha", type=float, default=5.0)
    p.add_argument("--beta", type=float, default=5.0)
    p.add_argument("--lr", type=float, default=4e-4)
    p.add_argument("--warmup", type=int, default=100)
    p.add_argument("--weight-decay", type=float, default=0.01)
    p.add_argument("--accum", type=int, default=32)
    p.add_argument("--epochs", type=int, default=1)
    p.add_argument("--rank", type=int, default=8)
    p.add_argument("--loss-on", choices=("all", "response"), default="all")
    p.add_argument("--out", help=f"output directory (default ${OUT_ENV}/<command>)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="tokenseek", description="Token selection and token-ditched fine-tuning.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    parser.add_argument("--config-file", help="key=value defaults, overridden by flags")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("init", help="write a freshly initialised checkpoint")
    p.add_argument("out")
    p.add_argument("--layers", type=int, default=2)
    p.add_argument("--hidden", type=int, default=16)
    p.add_argument("--heads", type=int, default=2)
    p.add_argument("--ff", type=int, default=32)
    p.add_argument("--max-seq", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_init)

    p = sub.add_parser("toy-data", help="write a synthetic instruction corpus")
    p.add_argument("out")
    p.add_argument("--task", choices=("reverse", "copy", "sort", "add"), default="reverse")
    p.add_argument("--count", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--prefix", default="")
    p.set_defaults(func=cmd_toy_data)

    p = sub.add_parser("render", help="print records rendered through the instruction template")
    p.add_argument("corpus")
    p.add_argument("--id")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("score", help="score every token of a corpus")
    p.add_argument("model")
    p.add_argument("corpus")
    p.add_argument("out")
    p.add_argument("--alpha", type=float, default=5.0)
    p.add_argument("--beta", type=float, default=5.0)
    p.add_argument("--signed", action="store_true", help="signed gradient accumulation instead of magnitude")
    p.add_argument("--loss-on", choices=("all", "response"), default="all")
    p.add_argument("--seed", type=int, default=0, help="recorded only; scoring is deterministic")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("train", help="fine-tune in full, random or seek mode")
    p.add_argument("model")
    p.add_argument("corpus")
    _train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("ablate", help="multi-seed stability study over modes and ratios")
    p.add_argument("model")
    p.add_argument("corpus")
    p.add_argument("--ratios", type=_floats, default=[0.1, 0.3, 0.5])
    p.add_argument("--modes", type=lambda t: [m for m in t.split(",") if m], default=["random", "seek"])
    p.add_argument("--seeds", type=_ints, default=[0, 1, 2, 3, 4])
    p.add_argument("--scores")
    _train_flags(p, with_mode=False)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("memreport", help="analytic or measured activation-memory report")
    p.add_argument("--config", help="L,H,n_h,ff,V,s")
    p.add_argument("--ratios", type=_floats, default=[0.1, 0.25, 0.5, 1.0])
    p.add_argument("--batch", type=int, default=1)
    p.add_argument("--run", help="run directory written by `train`")
    p.set_defaults(func=cmd_memreport)

    p = sub.add_parser("gradcheck", help="finite-difference and stop-gradient oracle suite")
    p.add_argument("--size", choices=sorted(SIZES), default="tiny")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("inspect", help="show one instance's selected tokens and scores")
    p.add_argument("scores")
    p.add_argument("instance_id")
    p.add_argument("--ratio", type=float, default=0.5)
    p.add_argument("--corpus", help="corpus the scores came from, to print token text")
    p.set_defaults(func=cmd_inspect)
    return parser


def read_config_file(path) -> dict[str, str]:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{lineno}: expected key=value")
            k, v = line.split("=", 1)
            out[k.strip().replace("-", "_")] = v.strip()
    return out


def _apply_config_file(parser, argv, path):
    """Re-parse with the file's values installed as subcommand defaults."""
    values = read_config_file(path)
    sub = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    first = parser.parse_args(argv)
    sp = sub.choices[first.command]
    known = {a.dest: a for a in sp._actions}
    defaults = {}
    for k, v in values.items():
        if k not in known:
            raise UsageError(f"{path}: unknown key {k!r} for command {first.command!r}")
        act = known[k]
        if isinstance(act, argparse._StoreTrueAction):
            defaults[k] = v.lower() in ("1", "true", "yes", "on")
        else:
            defaults[k] = act.type(v) if act.type else v
    sp.set_defaults(**defaults)
    return parser.parse_args(argv)


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        try:
            args = parser.parse_args(argv)
        except SystemExit as exc:  # --help, --version and usage errors
            return exc.code
        if args.config_file:
            if not Path(args.config_file).is_file():
                raise UsageError(f"config file not found: {args.config_file}")
            args = _apply_config_file(parser, argv, args.config_file)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s: %(message)s")
        return args.func(args)
    except UsageError as exc:
        print(f"tokenseek: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, KeyError, ValueError) as exc:
        print(f"tokenseek: error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    raise SystemExit(main())
