"""Training loops, evaluation, dataset preparation and ordering comparisons.

Runs are reproducible per seed in single-threaded mode: all randomness flows
from numpy SeedSequence children of ExperimentConfig.seed, evaluation uses a
fixed per-run seed, and two runs with the same config produce identical
MetricsLog records in every field except wall_time.
"""

from __future__ import annotations

import hashlib
import json
import os
import time
from dataclasses import asdict, dataclass

import numpy as np

from . import corpus as corpus_mod
from . import denoiser as dn
from . import diffusion, ordering, schedule
from .corpus import Vocab
from .errors import EmptyCorpus, IncompatibleSchedule, VersionMismatch

LN2 = np.log(2.0)


@dataclass
class ExperimentConfig:
    dataset: str
    data_dir: str
    out_dir: str
    strategy: str = "standard"
    explicit_groups: list | None = None
    blocks: int | None = None
    block_alpha: float = 1.0
    ig_window: int = 10
    num_steps: int = 16
    skew_weights: dict | None = None
    align_warp: list | None = None  # [[time_frac, groups_destroyed], ...]
    seq_len: int = 31
    batch_size: int = 64
    train_steps: int = 2000
    eval_every: int = 500
    eval_sequences: int = 64
    eval_mc_samples: int = 1
    checkpoint_every: int = 0  # 0: only at evals/end
    layers: int = 2
    model_dim: int = 64
    heads: int = 4
    ff_dim: int = 256
    time_embedding: str = "sinusoidal"
    dropout: float = 0.0
    lr: float = 3e-4
    lr_schedule: str = "cosine"  # or "constant"
    lr_final_frac: float = 0.1
    grad_clip: float = 1.0  # global norm; 0 disables
    seed: int = 0

    def to_json(self, path):
        with open(path, "w", encoding="utf-8") as f:
            json.dump(asdict(self), f, indent=2)

    @classmethod
    def from_json(cls, path) -> "ExperimentConfig":
        with open(path, "r", encoding="utf-8") as f:
            return cls(**json.load(f))


GENERATION_STRATEGIES = (
    "standard",
    "common-first",
    "rare-first",
    "random",
    "info-gain",
    "info-gain-low",
    "explicit",
)


def resolve_ordering(strategy: str, vocab: Vocab, train_seqs, seed: int,
                     explicit_groups=None, blocks=None, block_alpha: float = 1.0,
                     ig_window: int = 10) -> ordering.OrderingSpec:
    """Map a generation-order strategy name onto a destruction-order spec.

    Generation names are inverted here: common-first *generation* destroys
    rare categories first, and vice versa.
    """
    V = vocab.size
    if strategy == "standard":
        return ordering.order_explicit([list(range(V))], V)
    if strategy == "explicit":
        if not explicit_groups:
            raise ValueError("strategy 'explicit' needs explicit_groups")
        return ordering.order_explicit(explicit_groups, V)
    if strategy in ("common-first", "rare-first"):
        direction = "rare_first" if strategy == "common-first" else "common_first"
        if blocks:
            return ordering.make_blocks(vocab.probs, blocks, block_alpha, direction)
        return ordering.order_frequency(vocab.probs, direction)
    if strategy == "random":
        return ordering.order_random(V, seed)
    if strategy in ("info-gain", "info-gain-low"):
        windows = corpus_mod.window_iter(train_seqs, ig_window, ig_window)
        report = ordering.information_gain(windows, vocab)
        direction = "low_first" if strategy == "info-gain" else "high_first"
        return ordering.order_information_gain(report, direction)
    raise ValueError(f"unknown strategy {strategy!r}; choose from {GENERATION_STRATEGIES}")


def build_run_schedule(config: ExperimentConfig, order: ordering.OrderingSpec,
                       probs: np.ndarray) -> schedule.ScheduleTable:
    warp = None
    if config.align_warp:
        bounds = schedule.boundary_ratios(order, probs)
        warp = schedule.piecewise_warp([(float(tf), float(bounds[int(k)])) for tf, k in config.align_warp])
    elif config.skew_weights:
        warp = schedule.group_time_warp(order, probs, {int(g): w for g, w in config.skew_weights.items()})
    return schedule.build_schedule(order, probs, config.num_steps, warp)


# ---- dataset preparation and loading ----


def prepare_dataset(dataset: str, input_path, out_dir, toy_len: int = 31,
                    toy_count: int = 20000, seed: int = 0, max_vocab: int = 8300) -> None:
    """Write vocab.tsv plus train/valid/test splits under out_dir."""
    os.makedirs(out_dir, exist_ok=True)
    if dataset == "toy":
        rng = np.random.default_rng(seed)
        seqs = corpus_mod.generate_toy_corpus(toy_count, toy_len, rng)
        vocab = corpus_mod.toy_vocab(corpus_mod.token_frequencies(seqs, corpus_mod.toy_vocab()))
        n_train = int(toy_count * 0.9)
        n_valid = int(toy_count * 0.05)
        splits = {
            "train": seqs[:n_train],
            "valid": seqs[n_train : n_train + n_valid],
            "test": seqs[n_train + n_valid :],
        }
        for name, block in splits.items():
            with open(os.path.join(out_dir, f"{name}.txt"), "w", encoding="utf-8") as f:
                for row in block:
                    f.write("".join(vocab.tokens[i] for i in row) + "\n")
    elif dataset == "text8":
        with open(input_path, "rb") as f:
            data = f.read()
        vocab = corpus_mod.build_char_vocab(data)
        text = data.decode("ascii")
        n = len(text)
        cuts = (int(n * 0.9), int(n * 0.95))
        for name, chunk in (("train", text[: cuts[0]]), ("valid", text[cuts[0] : cuts[1]]),
                            ("test", text[cuts[1] :])):
            with open(os.path.join(out_dir, f"{name}.txt"), "w", encoding="ascii") as f:
                f.write(chunk)
        # marginals from the training split only
        vocab = corpus_mod.build_char_vocab(text[: cuts[0]])
    elif dataset == "wikitext2":
        names = {"train": "wiki.train.tokens", "valid": "wiki.valid.tokens", "test": "wiki.test.tokens"}
        if os.path.isdir(input_path):
            splits = {}
            for split, fname in names.items():
                with open(os.path.join(input_path, fname), "r", encoding="utf-8") as f:
                    splits[split] = f.readlines()
        else:
            with open(input_path, "r", encoding="utf-8") as f:
                lines = f.readlines()
            n = len(lines)
            cuts = (int(n * 0.9), int(n * 0.95))
            splits = {"train": lines[: cuts[0]], "valid": lines[cuts[0] : cuts[1]], "test": lines[cuts[1] :]}
        vocab = corpus_mod.build_word_vocab(splits["train"], max_vocab)
        for split, lines in splits.items():
            with open(os.path.join(out_dir, f"{split}.txt"), "w", encoding="utf-8") as f:
                f.writelines(lines)
    else:
        raise ValueError(f"unknown dataset {dataset!r}")
    corpus_mod.save_vocab(vocab, os.path.join(out_dir, "vocab.tsv"))


def load_dataset(dataset: str, data_dir):
    """Returns (vocab, {split: sequences}) for a prepared directory."""
    vocab = corpus_mod.load_vocab(os.path.join(data_dir, "vocab.tsv"))
    out = {}
    for split in ("train", "valid", "test"):
        path = os.path.join(data_dir, f"{split}.txt")
        if not os.path.exists(path):
            continue
        with open(path, "r", encoding="utf-8") as f:
            if dataset == "toy":
                out[split] = [vocab.encode(list(line.strip())) for line in f if line.strip()]
            elif dataset == "text8":
                out[split] = [vocab.encode(list(f.read()))]
            else:
                toks = []
                for line in f:
                    toks.extend(corpus_mod.tokenize_words(line))
                out[split] = [vocab.encode(toks, unk_ok=True)]
    if "train" not in out or not len(out["train"]):
        raise EmptyCorpus(f"no training data under {data_dir}")
    return vocab, out


def _split_hash(seqs) -> str:
    h = hashlib.sha256()
    for s in seqs:
        h.update(np.asarray(s, dtype=np.int64).tobytes())
    return h.hexdigest()


# ---- metrics ----


def write_metrics(path, records: list[dict]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for rec in records:
            f.write(json.dumps(rec) + "\n")


def read_metrics(path) -> list[dict]:
    with open(path, "r", encoding="utf-8") as f:
        return [json.loads(line) for line in f if line.strip()]


def validate_metrics(records: list[dict]) -> None:
    steps = [r["step"] for r in records]
    if any(b <= a for a, b in zip(steps, steps[1:])):
        raise ValueError("metric steps must be strictly increasing")
    for r in records:
        if abs(r["perplexity"] - 2.0 ** r["valid_nelbo_bits"]) > 1e-9 * max(1.0, r["perplexity"]):
            raise ValueError(f"perplexity inconsistent at step {r['step']}")


# ---- evaluation ----


def _eval_crops(seqs, seq_len: int, count: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    sampler = corpus_mod.batch_sampler(seqs, seq_len, count, rng)
    return next(sampler)


def eval_bits(model, z0: np.ndarray, table: schedule.ScheduleTable,
              mc_samples: int, seed: int) -> float:
    br = diffusion.nelbo_full(z0, model, table, mode="mc", mc_samples=mc_samples, seed=seed)
    return br.bits_per_token


def evaluate(ckpt_path, seqs, table: schedule.ScheduleTable, samples: int = 64,
             seq_len: int | None = None, seed: int = 0, mc_samples: int = 2):
    """Mean validation bits per token and perplexity for a saved checkpoint."""
    params, _, config = dn.load_checkpoint(ckpt_path)
    if config.vocab != table.num_categories:
        raise IncompatibleSchedule(
            f"checkpoint vocab {config.vocab} vs schedule {table.num_categories}")
    if config.num_steps != table.num_steps:
        raise IncompatibleSchedule(
            f"checkpoint T={config.num_steps} vs schedule T={table.num_steps}")
    model = dn.TransformerDenoiser(params, config)
    seq_len = seq_len or config.max_len
    z0 = _eval_crops(seqs, seq_len, samples, seed)
    bits = eval_bits(model, z0, table, mc_samples, seed)
    return bits, 2.0**bits


# ---- training ----


def train(config: ExperimentConfig):
    """Train one model per config; returns (checkpoint_path, metrics records)."""
    os.makedirs(config.out_dir, exist_ok=True)
    vocab, splits = load_dataset(config.dataset, config.data_dir)
    train_seqs = splits["train"]
    valid_seqs = splits.get("valid") or splits["train"]

    ss = np.random.SeedSequence(config.seed)
    init_seed, batch_seed, eval_seed, drop_seed = [int(s.generate_state(1)[0]) for s in ss.spawn(4)]

    order = resolve_ordering(
        config.strategy, vocab, train_seqs, seed=config.seed,
        explicit_groups=config.explicit_groups, blocks=config.blocks,
        block_alpha=config.block_alpha, ig_window=config.ig_window,
    )
    table = build_run_schedule(config, order, vocab.probs)

    dcfg = dn.DenoiserConfig(
        layers=config.layers, model_dim=config.model_dim, heads=config.heads,
        ff_dim=config.ff_dim, vocab=vocab.size, max_len=config.seq_len,
        num_steps=config.num_steps, time_embedding=config.time_embedding,
        dropout=config.dropout, seed=init_seed,
    )
    params = dn.init(dcfg)
    opt = dn.init_opt_state(params, lr=config.lr)
    model = dn.TransformerDenoiser(params, dcfg)

    batch_rng = np.random.default_rng(batch_seed)
    drop_rng = np.random.default_rng(drop_seed) if config.dropout > 0 else None
    sampler = corpus_mod.batch_sampler(train_seqs, config.seq_len, config.batch_size, batch_rng)
    eval_z0 = _eval_crops(valid_seqs, config.seq_len, config.eval_sequences, eval_seed)

    run_meta = {
        "config": asdict(config),
        "valid_split_hash": _split_hash(valid_seqs),
        "eval_seed": eval_seed,
        "group_of": order.group_of.tolist(),
    }
    with open(os.path.join(config.out_dir, "run.json"), "w", encoding="utf-8") as f:
        json.dump(run_meta, f, indent=2)
    schedule.save_schedule(table, os.path.join(config.out_dir, "schedule.bin"),
                           warp_desc=_warp_desc(config))

    ckpt_path = os.path.join(config.out_dir, "model.ckpt")
    metrics: list[dict] = []
    t0 = time.time()

    def run_eval(step, train_bits):
        bits = eval_bits(model, eval_z0, table, config.eval_mc_samples, eval_seed)
        rec = {
            "step": step,
            "train_nelbo_bits": train_bits,
            "valid_nelbo_bits": bits,
            "perplexity": 2.0**bits,
            "wall_time": time.time() - t0,
        }
        metrics.append(rec)
        write_metrics(os.path.join(config.out_dir, "metrics.ndjson"), metrics)
        dn.save_checkpoint(ckpt_path, params, opt, dcfg)
        return rec

    run_eval(0, None)
    window_nats: list[float] = []
    for step in range(1, config.train_steps + 1):
        z0 = next(sampler)
        batch = diffusion.make_training_batch(z0, table, batch_rng)
        # A NonFiniteLoss here aborts the run; the checkpoint written at the
        # previous evaluation is the retained last-good state.
        loss, grads = dn.loss_grad(params, dcfg, batch, table, drop_rng=drop_rng)
        if config.grad_clip > 0:
            clip_grads_(grads, config.grad_clip)
        opt.lr = _lr_at(config, step)
        dn.opt_step(params, grads, opt)
        window_nats.append(loss)
        if config.eval_every and step % config.eval_every == 0:
            run_eval(step, float(np.mean(window_nats)) / LN2)
            window_nats.clear()
        elif config.checkpoint_every and step % config.checkpoint_every == 0:
            dn.save_checkpoint(ckpt_path, params, opt, dcfg)
    if not metrics or metrics[-1]["step"] != config.train_steps:
        if config.train_steps > 0:
            run_eval(config.train_steps, float(np.mean(window_nats)) / LN2 if window_nats else None)
    return ckpt_path, metrics


def clip_grads_(grads: dict, max_norm: float) -> float:
    """Scale gradients in place so their global L2 norm is at most max_norm."""
    total = np.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if total > max_norm:
        scale = max_norm / total
        for g in grads.values():
            g *= scale
    return total


def _lr_at(config: ExperimentConfig, step: int) -> float:
    if config.lr_schedule == "constant" or config.train_steps == 0:
        return config.lr
    if config.lr_schedule != "cosine":
        raise ValueError(f"unknown lr schedule {config.lr_schedule!r}")
    lo = config.lr * config.lr_final_frac
    progress = step / config.train_steps
    return lo + 0.5 * (config.lr - lo) * (1.0 + np.cos(np.pi * progress))


def _warp_desc(config: ExperimentConfig) -> str:
    if config.align_warp:
        return f"align:{config.align_warp}"
    if config.skew_weights:
        return f"skew:{config.skew_weights}"
    return "identity"


def ensure_config_matches(expected: dn.DenoiserConfig, loaded: dn.DenoiserConfig) -> None:
    if expected != loaded:
        raise VersionMismatch(f"checkpoint config {loaded} does not match {expected}")


def compare_orderings(base_config: ExperimentConfig, strategies: list[str], repeats: int = 1):
    """Train one model per (strategy, repeat) with shared seed and budget.

    Returns (rows, summary): rows carry per-run final metrics, summary one
    line per strategy with mean and std of final validation bits, ranked
    best first.
    """
    if not strategies:
        raise ValueError("need at least one strategy")
    rows = []
    for strategy in strategies:
        for rep in range(repeats):
            fields = asdict(base_config)
            if strategy != base_config.strategy:
                # Ordering-specific machinery travels with its own strategy.
                fields.update(explicit_groups=None, align_warp=None,
                              skew_weights=None, blocks=None)
            fields.update(
                strategy=strategy,
                seed=base_config.seed + rep,
                out_dir=os.path.join(base_config.out_dir, f"{strategy}-r{rep}"),
            )
            cfg = ExperimentConfig(**fields)
            _, metrics = train(cfg)
            final = metrics[-1]
            rows.append({
                "strategy": strategy,
                "repeat": rep,
                "final_valid_bits": final["valid_nelbo_bits"],
                "perplexity": final["perplexity"],
                "metrics": metrics,
            })
    summary = []
    for strategy in strategies:
        vals = [r["final_valid_bits"] for r in rows if r["strategy"] == strategy]
        summary.append({
            "strategy": strategy,
            "mean_valid_bits": float(np.mean(vals)),
            "std_valid_bits": float(np.std(vals)),
            "runs": len(vals),
        })
    summary.sort(key=lambda r: r["mean_valid_bits"])
    return rows, summary


def default_toy_config(strategy: str, data_dir: str, out_dir: str, seed: int = 0,
                       **overrides) -> ExperimentConfig:
    """Desk-scale toy setup: T=16, 2-layer dim-64 model, 2k steps.

    The ordered variant destroys fills first and anchors last, with the warp
    aligned so half the steps cover the fill phase.
    """
    base = dict(
        dataset="toy", data_dir=data_dir, out_dir=out_dir, strategy=strategy,
        num_steps=16, seq_len=31, batch_size=32, train_steps=2000,
        eval_every=500, eval_sequences=64, eval_mc_samples=1,
        layers=2, model_dim=64, heads=4, ff_dim=256, lr=1e-3, seed=seed,
    )
    if strategy == "explicit":
        base["explicit_groups"] = [[5], [2], [3], [4], [0], [1]]
        base["align_warp"] = [[0.5, 4]]
    base.update(overrides)
    return ExperimentConfig(**base)
