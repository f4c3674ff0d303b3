"""Metrics, WER-bucketed evaluation reports, and the command-line surface.

Subcommands: ``pretrain``, ``finetune``, ``evaluate``, ``synth`` (build a noisy
corpus from clean text), ``wer`` (score two line-aligned files), and ``ablate``
(run a named ablation pipeline). Every TrainingConfig key can come from a flat
key=value config file and be overridden by a CLI flag; reports are emitted as
both a human-readable table and CSV/JSON (the CSV schema is the stable
contract: bucket, n, accuracy[, joint_accuracy]).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import typing
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np

from .corpus import (LabelMap, NoiseConfig, PairedExample, WerBuckets,
                     corrupt_corpus, dump_pairs, load_pairs, wer, _edit_distance,
                     _words)
from .encoder import Model, classify, encode_batch, load_checkpoint, save_checkpoint
from .textproc import build_vocab, encode
from .trainer import TrainingConfig, finetune, pretrain, _effective_len

ABLATIONS = {
    "full": {},
    "no_mlm": {"lam_mlm": 0.0},
    "no_lc": {"use_contrastive": False},
    "no_hard_soft": {"lam_sc": 0.0},
    "no_d_soft": {"lam_d": 0.0},
    "no_soft": {"use_soft": False},
}

OUTDIR_ENV = "ASROBUST_OUTDIR"


def joint_accuracy(pred_pairs, gold_pairs) -> float:
    """Fraction of positions where every label component matches."""
    if len(pred_pairs) != len(gold_pairs):
        raise ValueError(f"length mismatch: {len(pred_pairs)} vs {len(gold_pairs)}")
    if not pred_pairs:
        raise ValueError("joint accuracy of an empty prediction list is undefined")
    hits = sum(tuple(p) == tuple(g) for p, g in zip(pred_pairs, gold_pairs))
    return hits / len(pred_pairs)


@dataclass
class EvalReport:
    """Per-WER-bucket metrics plus aggregates; rows always end with 'all'."""

    rows: list[dict]
    overall_accuracy: float
    overall_joint_accuracy: float | None
    config: dict
    seeds: list[int]

    def to_csv(self) -> str:
        with_joint = self.overall_joint_accuracy is not None
        header = "bucket,n,accuracy" + (",joint_accuracy" if with_joint else "")
        lines = [header]
        for row in self.rows:
            cells = [row["bucket"], str(row["n"]), _fmt(row["accuracy"])]
            if with_joint:
                cells.append(_fmt(row["joint_accuracy"]))
            lines.append(",".join(cells))
        return "\n".join(lines) + "\n"

    def to_json(self) -> dict:
        return {"rows": self.rows, "overall_accuracy": self.overall_accuracy,
                "overall_joint_accuracy": self.overall_joint_accuracy,
                "config": self.config, "seeds": self.seeds}

    def table(self) -> str:
        with_joint = self.overall_joint_accuracy is not None
        head = f"{'bucket':<10}{'n':>7}{'accuracy':>11}"
        if with_joint:
            head += f"{'joint':>11}"
        lines = [head, "-" * len(head)]
        for row in self.rows:
            line = f"{row['bucket']:<10}{row['n']:>7}{row['accuracy']:>11.4f}"
            if with_joint:
                line += f"{row['joint_accuracy']:>11.4f}"
            lines.append(line)
        return "\n".join(lines)


def _fmt(x) -> str:
    return "" if x is None else f"{x:.6f}"


def predict(model: Model, examples, vocab, batch_size: int = 128) -> np.ndarray:
    """Dropout-off predictions on the asr side; (N, n_heads) class indices."""
    seq_len = _effective_len([ex.asr for ex in examples], model.config.max_len)
    seqs = [encode(ex.asr, vocab, seq_len) for ex in examples]
    preds = []
    for start in range(0, len(seqs), batch_size):
        reps = encode_batch(model, seqs[start:start + batch_size], dropout_on=False)
        logits = classify(model, reps)
        preds.append(np.stack([lg.values.argmax(axis=1) for lg in logits], axis=1))
    return np.concatenate(preds, axis=0)


def evaluate(model: Model, examples: list[PairedExample], buckets: WerBuckets,
             vocab, config_echo: dict | None = None, seeds=()) -> EvalReport:
    """Inference on the asr side, stratified by each example's WER bucket.

    In two-head mode 'accuracy' is the mean of per-head accuracies and
    'joint_accuracy' requires every head to be correct; single-task reports
    accuracy only.
    """
    if not examples:
        raise ValueError("cannot evaluate an empty example list")
    if not model.head_sizes or model.head_labels is None:
        raise ValueError("model has no labeled classification heads")
    label_map = LabelMap(tuple(tuple(h) for h in model.head_labels))
    gold = np.array([label_map.index(ex.label) for ex in examples])
    preds = predict(model, examples, vocab)
    per_head = preds == gold              # (N, n_heads)
    all_heads = per_head.all(axis=1)
    multihead = preds.shape[1] > 1

    def metrics(mask: np.ndarray) -> tuple[float, float | None]:
        acc = float(per_head[mask].mean())
        joint = float(all_heads[mask].mean()) if multihead else None
        return acc, joint

    rows = []
    assignments = [buckets.assign(ex.wer) for ex in examples]
    for name in buckets.names:
        idx = np.array([i for i, b in enumerate(assignments) if b == name], dtype=np.intp)
        if idx.size == 0:
            rows.append({"bucket": name, "n": 0, "accuracy": None,
                         "joint_accuracy": None})
            continue
        acc, joint = metrics(idx)
        rows.append({"bucket": name, "n": int(idx.size), "accuracy": acc,
                     "joint_accuracy": joint})
    overall_acc, overall_joint = metrics(np.arange(len(examples)))
    rows.append({"bucket": "all", "n": len(examples), "accuracy": overall_acc,
                 "joint_accuracy": overall_joint})
    return EvalReport(rows, overall_acc, overall_joint,
                      config_echo or {}, list(seeds))


# ---------------------------------------------------------------------------
# CLI plumbing

_HINTS = typing.get_type_hints(TrainingConfig)


def _parse_bool(raw: str) -> bool:
    lowered = raw.lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {raw!r}")


def load_config_file(path) -> dict:
    """Flat key=value lines ('#' comments) or a flat JSON object."""
    text = Path(path).read_text(encoding="utf-8")
    if text.lstrip().startswith("{"):
        values = json.loads(text)
    else:
        values = {}
        for lineno, line in enumerate(text.splitlines(), start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}: line {lineno}: expected key = value")
            key, raw = (part.strip() for part in line.split("=", 1))
            values[key] = raw
    out = {}
    for key, raw in values.items():
        if key not in _HINTS:
            raise ValueError(f"{path}: unknown config key {key!r}")
        t = _HINTS[key]
        if isinstance(raw, str):
            out[key] = _parse_bool(raw) if t is bool else t(raw)
        else:
            out[key] = t(raw)
    return out


def add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="flat key=value or JSON config file")
    group = parser.add_argument_group("config overrides")
    for f in fields(TrainingConfig):
        t = _HINTS[f.name]
        flag = "--" + f.name.replace("_", "-")
        if t is bool:
            group.add_argument(flag, dest=f.name, type=_parse_bool, default=None,
                               metavar="BOOL")
        else:
            group.add_argument(flag, dest=f.name, type=t, default=None,
                               metavar=t.__name__.upper())


def build_training_config(args) -> TrainingConfig:
    values = {}
    if getattr(args, "config", None):
        values.update(load_config_file(args.config))
    for f in fields(TrainingConfig):
        override = getattr(args, f.name, None)
        if override is not None:
            values[f.name] = override
    return TrainingConfig.from_dict(values)


def _outdir(args) -> Path:
    out = args.out or os.environ.get(OUTDIR_ENV) or "runs"
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _seed_list(args, cfg) -> list[int]:
    if getattr(args, "seeds", None):
        return [int(s) for s in args.seeds.split(",") if s.strip()]
    return [cfg.seed]


def _echo_config(path: Path, cfg: TrainingConfig) -> None:
    path.write_text(json.dumps(cfg.to_dict(), indent=1, sort_keys=True) + "\n",
                    encoding="utf-8")


def _make_buckets(kind: str, examples) -> WerBuckets:
    if kind == "google":
        return WerBuckets.google()
    if kind == "wav2vec":
        return WerBuckets.wav2vec()
    return WerBuckets.from_quartiles([ex.wer for ex in examples])


# ---------------------------------------------------------------------------
# subcommands

def cmd_pretrain(args) -> int:
    cfg = build_training_config(args)
    pairs = load_pairs(args.data)
    out = _outdir(args)
    vocab = build_vocab([p.clean for p in pairs] + [p.asr for p in pairs], cfg.min_freq)
    model = Model.init(cfg.encoder_config(len(vocab)), seed=cfg.seed)
    _, history = pretrain(model, pairs, vocab, cfg, log_path=out / "pretrain_log.jsonl")
    save_checkpoint(out / "checkpoint.npz", model, vocab)
    vocab.save(out / "vocab.txt")
    _echo_config(out / "config.json", cfg)
    last = history[-1] if history else {"l_pt": float("nan")}
    print(f"pretrained {cfg.pretrain_steps} steps on {len(pairs)} pairs "
          f"(final l_pt {last['l_pt']:.4f}) -> {out / 'checkpoint.npz'}")
    return 0


def cmd_finetune(args) -> int:
    cfg = build_training_config(args)
    examples = load_pairs(args.data)
    out = _outdir(args)
    seeds = _seed_list(args, cfg)
    metrics = []
    for seed in seeds:
        run_cfg = replace(cfg, seed=seed)
        run_dir = out if len(seeds) == 1 else out / f"seed{seed}"
        run_dir.mkdir(parents=True, exist_ok=True)
        model, vocab = _load_or_init(args, run_cfg, examples)
        model, history = finetune(model, examples, vocab, run_cfg,
                                  log_path=run_dir / "finetune_log.jsonl")
        save_checkpoint(run_dir / "checkpoint_best.npz", model, vocab)
        (run_dir / "history.json").write_text(json.dumps(history, indent=1) + "\n",
                                              encoding="utf-8")
        _echo_config(run_dir / "config.json", run_cfg)
        if history["best_val_metric"] is not None:
            metrics.append(history["best_val_metric"])
        print(f"seed {seed}: best val metric "
              f"{history['best_val_metric']} (epoch {history['best_epoch']})")
    if len(seeds) > 1 and metrics:
        summary = {"seeds": seeds, "val_metric_mean": float(np.mean(metrics)),
                   "val_metric_std": float(np.std(metrics))}
        (out / "summary.json").write_text(json.dumps(summary, indent=1) + "\n",
                                          encoding="utf-8")
        print(f"val metric over seeds: {summary['val_metric_mean']:.4f} "
              f"+/- {summary['val_metric_std']:.4f}")
    return 0


def _load_or_init(args, cfg: TrainingConfig, examples):
    if getattr(args, "init", None):
        return load_checkpoint(args.init)
    vocab = build_vocab([ex.clean for ex in examples] + [ex.asr for ex in examples],
                        cfg.min_freq)
    model = Model.init(cfg.encoder_config(len(vocab)), seed=cfg.seed)
    return model, vocab


def cmd_evaluate(args) -> int:
    model, vocab = load_checkpoint(args.checkpoint)
    examples = load_pairs(args.data)
    buckets = _make_buckets(args.buckets, examples)
    report = evaluate(model, examples, buckets, vocab,
                      config_echo={"checkpoint": str(args.checkpoint),
                                   "data": str(args.data), "buckets": args.buckets})
    out = _outdir(args)
    (out / "report.csv").write_text(report.to_csv(), encoding="utf-8")
    (out / "report.json").write_text(json.dumps(report.to_json(), indent=1) + "\n",
                                     encoding="utf-8")
    print(report.table())
    return 0


def cmd_synth(args) -> int:
    cfg = NoiseConfig(target_wer_median=args.target_wer, wer_spread=args.wer_spread,
                      sub_frac=args.sub_frac, del_frac=args.del_frac,
                      ins_frac=args.ins_frac, seed=args.seed)
    path = Path(args.input)
    if path.suffix == ".jsonl":
        examples = load_pairs(path)
    else:
        lines = [ln.strip() for ln in path.read_text(encoding="utf-8").splitlines()
                 if ln.strip()]
        examples = [PairedExample(f"line{i:06d}", text, text, None, 0.0)
                    for i, text in enumerate(lines)]
    noisy = corrupt_corpus([ex.clean for ex in examples], cfg)
    for ex, hyp in zip(examples, noisy):
        ex.asr = hyp
        ex.wer = wer(ex.clean, hyp) if ex.clean.split() else 0.0
    dump_pairs(args.output, examples)
    med = float(np.median([ex.wer for ex in examples])) if examples else 0.0
    print(f"wrote {len(examples)} pairs to {args.output} (median wer {med:.3f})")
    return 0


def cmd_wer(args) -> int:
    refs = Path(args.ref).read_text(encoding="utf-8").splitlines()
    hyps = Path(args.hyp).read_text(encoding="utf-8").splitlines()
    if len(refs) != len(hyps):
        raise ValueError(f"line count mismatch: {len(refs)} refs vs {len(hyps)} hyps")
    edits = words = 0
    for ref, hyp in zip(refs, hyps):
        ref_words = _words(ref)
        if not ref_words:
            raise ValueError("empty reference line")
        edits += _edit_distance(ref_words, _words(hyp))
        words += len(ref_words)
    print(edits / words)
    return 0


def cmd_ablate(args) -> int:
    if args.name not in ABLATIONS:
        raise ValueError(f"unknown ablation {args.name!r}; "
                         f"choose from {sorted(ABLATIONS)}")
    base = build_training_config(args)
    cfg = replace(base, **ABLATIONS[args.name])
    train = load_pairs(args.data)
    test = load_pairs(args.test) if args.test else None
    out = _outdir(args) / args.name
    out.mkdir(parents=True, exist_ok=True)
    seeds = _seed_list(args, cfg)
    accs = []
    for seed in seeds:
        run_cfg = replace(cfg, seed=seed)
        run_dir = out if len(seeds) == 1 else out / f"seed{seed}"
        run_dir.mkdir(parents=True, exist_ok=True)
        vocab = build_vocab([p.clean for p in train] + [p.asr for p in train],
                            run_cfg.min_freq)
        model = Model.init(run_cfg.encoder_config(len(vocab)), seed=seed)
        pretrain(model, train, vocab, run_cfg, log_path=run_dir / "pretrain_log.jsonl")
        model, history = finetune(model, train, vocab, run_cfg,
                                  log_path=run_dir / "finetune_log.jsonl")
        save_checkpoint(run_dir / "checkpoint_best.npz", model, vocab)
        result = {"ablation": args.name, "seed": seed,
                  "best_val_metric": history["best_val_metric"]}
        if test is not None:
            buckets = _make_buckets(args.buckets, test)
            report = evaluate(model, test, buckets, vocab,
                              config_echo={"ablation": args.name, **run_cfg.to_dict()},
                              seeds=[seed])
            (run_dir / "report.csv").write_text(report.to_csv(), encoding="utf-8")
            (run_dir / "report.json").write_text(
                json.dumps(report.to_json(), indent=1) + "\n", encoding="utf-8")
            result["test_accuracy"] = report.overall_accuracy
            accs.append(report.overall_accuracy)
        (run_dir / "result.json").write_text(json.dumps(result, indent=1) + "\n",
                                             encoding="utf-8")
        print(f"[{args.name}] seed {seed}: val={history['best_val_metric']}"
              + (f" test_acc={result.get('test_accuracy'):.4f}" if test else ""))
    if accs:
        summary = {"ablation": args.name, "seeds": seeds,
                   "test_accuracy_mean": float(np.mean(accs)),
                   "test_accuracy_std": float(np.std(accs))}
        (out / "summary.json").write_text(json.dumps(summary, indent=1) + "\n",
                                          encoding="utf-8")
    return 0


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="asrobust",
        description="ASR-error-robust representation learning harness")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="contrastive + MLM pre-training")
    p.add_argument("--data", required=True, help="JSONL pair file")
    p.add_argument("--out", help=f"output dir (or ${OUTDIR_ENV})")
    add_config_flags(p)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="supervised fine-tuning")
    p.add_argument("--data", required=True)
    p.add_argument("--init", help="checkpoint to start from")
    p.add_argument("--out", help=f"output dir (or ${OUTDIR_ENV})")
    p.add_argument("--seeds", help="comma-separated seeds, e.g. 1,2,3")
    add_config_flags(p)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("evaluate", help="WER-bucketed evaluation report")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--buckets", choices=("google", "wav2vec", "quartiles"),
                   default="quartiles")
    p.add_argument("--out", help=f"output dir (or ${OUTDIR_ENV})")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("synth", help="corrupt clean text into a paired corpus")
    p.add_argument("--input", required=True, help=".txt (one sentence/line) or .jsonl")
    p.add_argument("--output", required=True, help="JSONL pair file to write")
    p.add_argument("--target-wer", type=float, default=0.25)
    p.add_argument("--wer-spread", type=float, default=0.15)
    p.add_argument("--sub-frac", type=float, default=0.6)
    p.add_argument("--del-frac", type=float, default=0.2)
    p.add_argument("--ins-frac", type=float, default=0.2)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("wer", help="corpus WER between two line-aligned files")
    p.add_argument("--ref", required=True)
    p.add_argument("--hyp", required=True)
    p.set_defaults(func=cmd_wer)

    p = sub.add_parser("ablate", help="run a named ablation pipeline")
    p.add_argument("--name", required=True, choices=sorted(ABLATIONS))
    p.add_argument("--data", required=True, help="train JSONL pair file")
    p.add_argument("--test", help="test JSONL pair file (enables evaluation)")
    p.add_argument("--buckets", choices=("google", "wav2vec", "quartiles"),
                   default="quartiles")
    p.add_argument("--out", help=f"output dir (or ${OUTDIR_ENV})")
    p.add_argument("--seeds", help="comma-separated seeds")
    add_config_flags(p)
    p.set_defaults(func=cmd_ablate)
    return parser


def cli(argv=None) -> int:
    """Entry point returning an exit code: 0 ok, 1 runtime error, 2 usage error."""
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (OSError, ValueError, RuntimeError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(cli())


if __name__ == "__main__":
    main()
