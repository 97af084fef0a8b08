"""Command-line entry point wiring all modules.

Subcommands: prepare, order, schedule, train, eval, compare, sample,
viz-forward, viz-reverse, export-csv. Every subcommand is deterministic
given --seed. Exit codes: 0 success, 1 runtime error, 2 usage error.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys


def _limit_threads(n: int) -> None:
    os.environ.setdefault("OMP_NUM_THREADS", str(n))
    os.environ.setdefault("OPENBLAS_NUM_THREADS", str(n))
    try:
        import threadpoolctl

        threadpoolctl.threadpool_limits(limits=n)
    except Exception:
        pass


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ordiff",
                                description="Ordered absorbing discrete diffusion")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--quiet", action="store_true")
    # Same globals accepted after the subcommand; SUPPRESS keeps a value given
    # before the subcommand from being clobbered by subparser defaults.
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    common.add_argument("--threads", type=int, default=argparse.SUPPRESS)
    common.add_argument("--quiet", action="store_true", default=argparse.SUPPRESS)
    sub = p.add_subparsers(dest="command", required=True, parser_class=(
        lambda **kw: argparse.ArgumentParser(parents=[common], **kw)))

    sp = sub.add_parser("prepare", help="tokenize a corpus and write vocab + splits")
    sp.add_argument("--dataset", required=True, choices=["text8", "wikitext2", "toy"])
    sp.add_argument("--input", default=None)
    sp.add_argument("--out", required=True)
    sp.add_argument("--toy-len", type=int, default=31)
    sp.add_argument("--toy-count", type=int, default=20000)
    sp.add_argument("--max-vocab", type=int, default=8300)

    so = sub.add_parser("order", help="build a destruction ordering")
    so.add_argument("--strategy", required=True,
                    choices=["common-first", "rare-first", "random", "info-gain", "info-gain-low"])
    so.add_argument("--blocks", type=int, default=None)
    so.add_argument("--alpha", type=float, default=1.0)
    so.add_argument("--ig-window", type=int, default=10)
    so.add_argument("--vocab", required=True)
    so.add_argument("--corpus", default=None, help="prepared data dir (info-gain strategies)")
    so.add_argument("--dataset", default="toy", help="dataset kind of --corpus")
    so.add_argument("--out", required=True)

    ss = sub.add_parser("schedule", help="build the mask-probability table")
    ss.add_argument("--order", required=True)
    ss.add_argument("--vocab", required=True)
    ss.add_argument("-T", "--steps", type=int, required=True, dest="T")
    ss.add_argument("--skew-weight", action="append", default=[], metavar="G=W")
    ss.add_argument("--align", action="append", default=[], metavar="TIME=GROUPS",
                    help="pin warp(time)=boundary ratio after GROUPS destroyed")
    ss.add_argument("--out", required=True)

    st = sub.add_parser("train", help="train a denoiser per an experiment config")
    st.add_argument("--config", required=True)

    se = sub.add_parser("eval", help="evaluate a checkpoint")
    se.add_argument("--ckpt", required=True)
    se.add_argument("--data", required=True, help="prepared data dir")
    se.add_argument("--dataset", default="toy")
    se.add_argument("--split", default="test")
    se.add_argument("--schedule", required=True)
    se.add_argument("--samples", type=int, default=64)
    se.add_argument("--seq-len", type=int, default=None)

    sc = sub.add_parser("compare", help="train one model per ordering strategy")
    sc.add_argument("--config", required=True)
    sc.add_argument("--strategies", required=True, help="comma-separated strategy names")
    sc.add_argument("--repeats", type=int, default=1)
    sc.add_argument("--csv", default=None, help="also export per-step metrics CSV")

    sg = sub.add_parser("sample", help="generate sequences from a checkpoint")
    sg.add_argument("--ckpt", required=True)
    sg.add_argument("--schedule", required=True)
    sg.add_argument("--vocab", required=True)
    sg.add_argument("--num", type=int, default=4)
    sg.add_argument("--seq-len", type=int, default=None)
    sg.add_argument("--out", default=None)

    sv = sub.add_parser("viz-forward", help="text dump of a forward corruption trajectory")
    sv.add_argument("--data", required=True, help="prepared data dir")
    sv.add_argument("--dataset", default="text8")
    sv.add_argument("--split", default="valid")
    sv.add_argument("--schedule", required=True)
    sv.add_argument("--vocab", required=True)
    sv.add_argument("--snapshots", type=int, default=9)
    sv.add_argument("--seq-len", type=int, default=256)
    sv.add_argument("--out", default=None)

    sr = sub.add_parser("viz-reverse", help="text dump of a generation trajectory")
    sr.add_argument("--ckpt", required=True)
    sr.add_argument("--schedule", required=True)
    sr.add_argument("--vocab", required=True)
    sr.add_argument("--snapshots", type=int, default=9)
    sr.add_argument("--seq-len", type=int, default=None)
    sr.add_argument("--out", default=None)

    sx = sub.add_parser("export-csv", help="flatten metrics logs to plot-ready CSV")
    sx.add_argument("--log", action="append", required=True, metavar="STRATEGY[:REPEAT]=PATH")
    sx.add_argument("--out", required=True)
    return p


def _emit(text: str, out_path, quiet: bool) -> None:
    if out_path:
        with open(out_path, "w", encoding="utf-8") as f:
            f.write(text)
    if not quiet:
        print(text, end="" if text.endswith("\n") else "\n")


def _load_vocab(path):
    from . import corpus

    vocab = corpus.load_vocab(path)
    return vocab


def _decode_line(vocab, ids) -> str:
    # '?' for characters, '<mask>' for word-level vocabularies.
    char_level = all(len(t) == 1 for t in vocab.tokens)
    if char_level:
        return "".join(vocab.decode(ids, mask_char="?"))
    return " ".join(vocab.decode(ids, mask_char="<mask>"))


def _snapshot_times(T: int, snapshots: int) -> list[int]:
    import numpy as np

    return sorted(set(int(round(x)) for x in np.linspace(0, T, max(2, snapshots))))


def cmd_prepare(args) -> int:
    from . import trainer

    trainer.prepare_dataset(args.dataset, args.input, args.out, toy_len=args.toy_len,
                            toy_count=args.toy_count, seed=args.seed, max_vocab=args.max_vocab)
    if not args.quiet:
        print(f"prepared {args.dataset} under {args.out}")
    return 0


def cmd_order(args) -> int:
    from . import ordering, trainer

    vocab = _load_vocab(args.vocab)
    train_seqs = None
    if args.strategy in ("info-gain", "info-gain-low"):
        if not args.corpus:
            raise SystemExit("info-gain strategies need --corpus")
        _, splits = trainer.load_dataset(args.dataset, args.corpus)
        train_seqs = splits["train"]
    spec = trainer.resolve_ordering(args.strategy, vocab, train_seqs, seed=args.seed,
                                    blocks=args.blocks, block_alpha=args.alpha,
                                    ig_window=args.ig_window)
    ordering.save_ordering(spec, args.out)
    if not args.quiet:
        print(f"wrote ordering (G={spec.num_groups}) to {args.out}")
    return 0


def cmd_schedule(args) -> int:
    from . import ordering, schedule

    vocab = _load_vocab(args.vocab)
    order = ordering.load_ordering(args.order)
    warp = None
    desc = "identity"
    if args.align:
        bounds = schedule.boundary_ratios(order, vocab.probs)
        pts = []
        for item in args.align:
            tf, k = item.split("=")
            pts.append((float(tf), float(bounds[int(k)])))
        warp = schedule.piecewise_warp(sorted(pts))
        desc = f"align:{args.align}"
    elif args.skew_weight:
        weights = {}
        for item in args.skew_weight:
            g, w = item.split("=")
            weights[int(g)] = float(w)
        warp = schedule.group_time_warp(order, vocab.probs, weights)
        desc = f"skew:{weights}"
    table = schedule.build_schedule(order, vocab.probs, args.T, warp)
    schedule.save_schedule(table, args.out, order_path=args.order, warp_desc=desc)
    if not args.quiet:
        print(f"wrote schedule T={args.T} V={table.num_categories} to {args.out}")
    return 0


def cmd_train(args) -> int:
    from . import trainer

    config = trainer.ExperimentConfig.from_json(args.config)
    ckpt, metrics = trainer.train(config)
    if not args.quiet:
        last = metrics[-1]
        print(f"checkpoint: {ckpt}")
        print(f"final valid bits/token: {last['valid_nelbo_bits']:.4f} "
              f"perplexity: {last['perplexity']:.3f}")
    return 0


def cmd_eval(args) -> int:
    from . import schedule, trainer

    table = schedule.load_schedule(args.schedule)
    _, splits = trainer.load_dataset(args.dataset, args.data)
    seqs = splits[args.split]
    bits, ppl = trainer.evaluate(args.ckpt, seqs, table, samples=args.samples,
                                 seq_len=args.seq_len, seed=args.seed)
    print(json.dumps({"bits_per_token": bits, "perplexity": ppl}))
    return 0


def cmd_compare(args) -> int:
    from . import trainer

    base = trainer.ExperimentConfig.from_json(args.config)
    strategies = [s.strip() for s in args.strategies.split(",") if s.strip()]
    rows, summary = trainer.compare_orderings(base, strategies, repeats=args.repeats)
    width = max(len(s) for s in strategies)
    print(f"{'strategy':<{width}}  mean_bits  std_bits  runs")
    for row in summary:
        print(f"{row['strategy']:<{width}}  {row['mean_valid_bits']:.4f}     "
              f"{row['std_valid_bits']:.4f}    {row['runs']}")
    if args.csv:
        logs = [(r["strategy"], r["repeat"], r["metrics"]) for r in rows]
        export_metrics_csv(logs, args.csv)
        if not args.quiet:
            print(f"wrote {args.csv}")
    return 0


def cmd_sample(args) -> int:
    import numpy as np

    from . import denoiser, diffusion, schedule

    table = schedule.load_schedule(args.schedule)
    vocab = _load_vocab(args.vocab)
    params, _, config = denoiser.load_checkpoint(args.ckpt)
    model = denoiser.TransformerDenoiser(params, config)
    rng = np.random.default_rng(args.seed)
    seq_len = args.seq_len or config.max_len
    ids, _ = diffusion.generate(model, table, seq_len, rng, batch=args.num)
    text = "\n".join(_decode_line(vocab, row) for row in ids) + "\n"
    _emit(text, args.out, args.quiet)
    return 0


def cmd_viz_forward(args) -> int:
    import numpy as np

    from . import corpus, diffusion, schedule, trainer

    table = schedule.load_schedule(args.schedule)
    vocab = _load_vocab(args.vocab)
    _, splits = trainer.load_dataset(args.dataset, args.data)
    rng = np.random.default_rng(args.seed)
    sampler = corpus.batch_sampler(splits[args.split], args.seq_len, 1, rng)
    z0 = next(sampler)[0]

    T = table.num_steps
    # One coherent trajectory: each position masks at the first t with u < m_t.
    u = rng.random(z0.shape)
    lines = []
    for t in _snapshot_times(T, args.snapshots):
        masked = u < table.m[t][z0]
        zt = np.where(masked, table.num_categories, z0)
        lines.append(f"t={t} {_decode_line(vocab, zt)}")
    _emit("\n".join(lines) + "\n", args.out, args.quiet)
    return 0


def cmd_viz_reverse(args) -> int:
    import numpy as np

    from . import denoiser, diffusion, schedule

    table = schedule.load_schedule(args.schedule)
    vocab = _load_vocab(args.vocab)
    params, _, config = denoiser.load_checkpoint(args.ckpt)
    model = denoiser.TransformerDenoiser(params, config)
    rng = np.random.default_rng(args.seed)
    seq_len = args.seq_len or config.max_len
    record = _snapshot_times(table.num_steps, args.snapshots)
    _, snaps = diffusion.generate(model, table, seq_len, rng, batch=1, record_at=record)
    snaps.sort(key=lambda x: -x[0])
    lines = [f"t={t} {_decode_line(vocab, row[0])}" for t, row in snaps]
    _emit("\n".join(lines) + "\n", args.out, args.quiet)
    return 0


def export_metrics_csv(logs, out_path) -> None:
    """Flatten (strategy, repeat, records) logs into a plot-ready CSV."""
    if not logs:
        raise ValueError("no metrics logs given")
    with open(out_path, "w", encoding="utf-8", newline="") as f:
        w = csv.writer(f)
        w.writerow(["strategy", "repeat", "step", "valid_bits", "perplexity"])
        for strategy, repeat, records in logs:
            for rec in records:
                w.writerow([strategy, repeat, rec["step"],
                            repr(rec["valid_nelbo_bits"]), repr(rec["perplexity"])])


def cmd_export_csv(args) -> int:
    from . import trainer

    logs = []
    for item in args.log:
        head, path = item.rsplit("=", 1)
        strategy, _, rep = head.partition(":")
        logs.append((strategy, int(rep) if rep else 0, trainer.read_metrics(path)))
    export_metrics_csv(logs, args.out)
    if not args.quiet:
        print(f"wrote {args.out}")
    return 0


_HANDLERS = {
    "prepare": cmd_prepare,
    "order": cmd_order,
    "schedule": cmd_schedule,
    "train": cmd_train,
    "eval": cmd_eval,
    "compare": cmd_compare,
    "sample": cmd_sample,
    "viz-forward": cmd_viz_forward,
    "viz-reverse": cmd_viz_reverse,
    "export-csv": cmd_export_csv,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    _limit_threads(args.threads)
    try:
        return _HANDLERS[args.command](args)
    except BrokenPipeError:
        return 1
    except Exception as exc:  # runtime errors exit 1; argparse handles usage (2)
        print(f"ordiff: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
