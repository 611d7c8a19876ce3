"""Command-line entry point: train, eval, codebook-stats, ablate, synth."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .codebook import reset_usage, write_usage_csv
from .config import ABLATIONS, ConfigError, ModelConfig
from .harness import (
    Normalizer,
    aggregate,
    evaluate,
    format_mean_std,
    load_features,
    make_plans,
    run_training,
    synth_generate,
    write_features,
)
from .harness.data import EEGDataset
from .harness.splits import PROTOCOLS, audit_plan
from .harness.training import predict
from .model import load_checkpoint


def _config(args) -> ModelConfig:
    cfg = ModelConfig.load(args.config) if args.config else ModelConfig()
    if args.set:
        cfg = ModelConfig.from_text(cfg.to_text() + "\n" + "\n".join(args.set))
    cfg.validate()
    return cfg


def _dataset(args, cfg: ModelConfig) -> EEGDataset:
    if args.data == "synth":
        return synth_generate(seed=cfg.seed, subjects=args.subjects, classes=cfg.classes,
                              samples_per_class=args.per_class, trials_per_class=args.trials_per_class,
                              sessions=args.sessions, n=cfg.n, d=cfg.d)
    return load_features(args.data)


def _run_protocol(cfg, ds, args, out: Path | None, label: str = ""):
    plans = make_plans(ds, args.protocol)
    if args.max_plans:
        plans = plans[:args.max_plans]
    reports = []
    for plan in plans:
        audit_plan(ds, plan)
        res = run_training(cfg, ds, plan, out_dir=out, usage=args.usage)
        reports.append(res.report)
        print(f"{label}{plan.name}: train {res.train_report.accuracy:.2f}  "
              f"test ACC {res.report.accuracy:.2f}  F1 {res.report.f1:.2f}")
    return aggregate(reports)


def cmd_train(args) -> int:
    cfg = _config(args)
    ds = _dataset(args, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.txt")
    agg = _run_protocol(cfg, ds, args, out)
    print(f"{args.protocol}: {agg.summary()}")
    return 0


def cmd_ablate(args) -> int:
    cfg = _config(args)
    ds = _dataset(args, cfg)
    out = Path(args.out) if args.out else None
    rows = [("full", cfg)] + [(f"w/o {d}", cfg.with_ablation(d)) for d in args.drop]
    results = []
    for name, variant in rows:
        sub = None if out is None else out / name.replace("w/o ", "no_")
        results.append((name, _run_protocol(variant, ds, args, sub, label=f"[{name}] ")))
    print(f"{'variant':<16}{'ACC(%)':>14}{'F1(%)':>14}")
    for name, agg in results:
        print(f"{name:<16}{format_mean_std(agg.accuracies):>14}{format_mean_std(agg.f1s):>14}")
    return 0


def _load(args):
    model, buffers = load_checkpoint(args.checkpoint)
    ds = load_features(args.data)
    norm = Normalizer(buffers["norm_mean"], buffers["norm_std"]) if "norm_mean" in buffers else None
    return model, ds, norm


def cmd_eval(args) -> int:
    model, ds, norm = _load(args)
    rep = evaluate(model, ds, normalizer=norm, name=Path(args.data).name)
    print(f"ACC {rep.accuracy:.2f}  F1 {rep.f1:.2f}")
    print("confusion (rows = true class):")
    for row in rep.confusion:
        print("  " + " ".join(f"{v:5d}" for v in row))
    return 0


def cmd_codebook_stats(args) -> int:
    model, ds, norm = _load(args)
    books = model.codebooks()
    if args.codebook not in books:
        print(f"unknown codebook {args.codebook!r}; available: {', '.join(books)}", file=sys.stderr)
        return 2
    for cb in books.values():
        reset_usage(cb)
    feats = ds.features if norm is None else norm.transform(ds.features)
    predict(model, feats)
    write_usage_csv(books[args.codebook], args.out)
    used = int(np.count_nonzero(books[args.codebook].usage_counts))
    print(f"{args.codebook}: {used} of {books[args.codebook].K} embeddings used over {len(ds)} samples")
    return 0


def cmd_synth(args) -> int:
    ds = synth_generate(seed=args.seed, subjects=args.subjects, classes=args.classes,
                        samples_per_class=args.per_class, trials_per_class=args.trials_per_class,
                        sessions=args.sessions)
    write_features(ds, args.out)
    print(f"wrote {len(ds)} samples to {args.out}")
    return 0


def _add_data_args(p, out_required: bool):
    p.add_argument("--config", help="key = value config file (defaults when omitted)")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config field")
    p.add_argument("--data", required=True, help="feature file (.mefx or .csv) or 'synth'")
    p.add_argument("--protocol", choices=PROTOCOLS, default="dep")
    p.add_argument("--out", required=out_required)
    p.add_argument("--usage", choices=("train", "test"), default="test",
                   help="which final pass the exported codebook histograms count")
    p.add_argument("--max-plans", type=int, default=0, help="run only the first N plans")
    p.add_argument("--subjects", type=int, default=2, help="synthetic data: subjects")
    p.add_argument("--per-class", type=int, default=16, help="synthetic data: samples per class")
    p.add_argument("--trials-per-class", type=int, default=4, help="synthetic data: trials per class")
    p.add_argument("--sessions", type=int, default=1, help="synthetic data: sessions")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mind-eeg", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch losses")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train and evaluate under a split protocol")
    _add_data_args(p, out_required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("ablate", help="compare the full model with streams removed")
    _add_data_args(p, out_required=False)
    p.add_argument("--drop", nargs="+", choices=ABLATIONS, required=True)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("eval", help="score a checkpoint on a feature file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("codebook-stats", help="export codebook usage on a feature file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="CSV path")
    p.add_argument("--codebook", default="global", help="global, inter, or intra_<region>")
    p.set_defaults(func=cmd_codebook_stats)

    p = sub.add_parser("synth", help="write a synthetic feature file")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--subjects", type=int, default=1)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--per-class", type=int, default=20)
    p.add_argument("--trials-per-class", type=int, default=1)
    p.add_argument("--sessions", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (ConfigError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
