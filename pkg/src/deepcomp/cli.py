"""Command line entry point: ``deepcomp <subcommand> ...``.

Exit codes: 0 success, 2 config error, 3 data error, 4 numerical divergence.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import harness, metrics, synth
from .checkpoint import CheckpointError
from .losses import TrainingDivergence
from .nets import ConfigError

EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 2, 3, 4

_TRAIN_OVERRIDES = {
    "seed": "seed", "disc": "disc_kind", "lambda_recon": "lambda_recon", "lambda_perc": "lambda_perceptual",
    "lambda_hsv": "lambda_hsv", "lr_g": "lr_g", "lr_d": "lr_d", "epochs": "epochs", "batch": "batch_size",
}


def _cmd_synth(args) -> int:
    corpus = synth.discover_corpus(args.corpus)
    if args.filters:
        filters = [synth.StyleFilter.from_dict(d) for d in json.loads(Path(args.filters).read_text())]
    else:
        filters = synth.filter_pool(args.pool_size, args.seed, tuple(args.kinds.split(",")))
    mans = synth.build_dataset(corpus, filters, args.train_count, args.test_count, args.out, args.seed, args.size)
    for split, man in mans.items():
        print(f"{split}: {len(man.entries)} pairs -> {Path(args.out) / split}")
    return 0


def _cmd_corpus(args) -> int:
    synth.synthetic_corpus(args.out, args.count, args.size, args.seed)
    print(f"wrote {args.count} scenes to {args.out}")
    return 0


def _train_config(args) -> harness.TrainConfig:
    base = harness.TrainConfig.from_file(args.config).to_dict() if args.config else {}
    base["data_dir"], base["out_dir"] = args.data, args.out
    for flag, key in _TRAIN_OVERRIDES.items():
        v = getattr(args, flag)
        if v is not None:
            base[key] = v
    return harness.TrainConfig.from_dict(base)


def _cmd_train(args) -> int:
    cfg = _train_config(args)
    ckpt, log = harness.train(cfg)
    last = log.steps[-1]
    print(f"trained {ckpt.step} steps; final total {last['total']:.4f}, recon {last['recon']:.4f}, "
          f"d_loss {last['d_loss']:.4f} -> {Path(cfg.out_dir) / 'final.dicc'}")
    return 0


def _print_report(name: str, report: metrics.MetricsReport) -> None:
    agg = report.to_dict()["aggregates"]
    print(f"{name:10s} " + "  ".join(f"{m}={agg[m]['mean']}" for m in metrics.METRIC_NAMES))


def _cmd_eval(args) -> int:
    model, baseline = harness.evaluate(args.ckpt, args.data, args.out)
    _print_report("model", model)
    _print_report("composite", baseline)
    return 0


def _cmd_harmonize(args) -> int:
    harness.harmonize(args.ckpt, args.inp, args.out)
    print(f"wrote {args.out}")
    return 0


def _cmd_metrics(args) -> int:
    a = synth.load_image(args.a)
    b = synth.load_image(args.b)
    vals = metrics.compute_all(a, b)
    for m in metrics.METRIC_NAMES:
        print(f"{m}\t{metrics._fmt_str(vals[m])}")
    return 0


def _cmd_gridsearch(args) -> int:
    try:
        grid = json.loads(Path(args.grid).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read grid {args.grid}: {exc}") from None
    results = harness.gridsearch(args.data, args.out, grid)
    print((Path(args.out) / "ranking.tsv").read_text(), end="")
    return 0 if results else EXIT_CONFIG


def _cmd_compare(args) -> int:
    cfg = _train_config(args)
    rows = harness.compare_discriminators(cfg, args.out)
    print((Path(args.out) / "comparison.tsv").read_text(), end="")
    return 0 if rows else EXIT_DATA


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="deepcomp", description="Composite synthesis, GAN harmonization and metrics")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("synth", help="build train/test composite pairs from an image+mask corpus")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--train-count", type=int, required=True)
    p.add_argument("--test-count", type=int, required=True)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--filters", help="JSON list of style filters (default: seeded random pool)")
    p.add_argument("--kinds", default="hue_shift,sat_scale", help="filter kinds for the random pool")
    p.add_argument("--pool-size", type=int, default=32)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("corpus", help="write a procedural image+mask corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=100)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_corpus)

    for name, func, help_ in (("train", _cmd_train, "train the generator/discriminator pair"),
                              ("compare", _cmd_compare, "train with both discriminator kinds and compare")):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--data", required=True)
        p.add_argument("--out", required=True)
        p.add_argument("--config")
        p.add_argument("--seed", type=int)
        p.add_argument("--disc", choices=("patch", "resnet"))
        p.add_argument("--lambda-recon", type=float)
        p.add_argument("--lambda-perc", type=float)
        p.add_argument("--lambda-hsv", type=float)
        p.add_argument("--lr-g", type=float)
        p.add_argument("--lr-d", type=float)
        p.add_argument("--epochs", type=int)
        p.add_argument("--batch", type=int)
        p.set_defaults(func=func)

    p = sub.add_parser("eval", help="score a checkpoint on a dataset split")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True, help="split directory containing manifest.json")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("harmonize", help="harmonize a single composite image")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_harmonize)

    p = sub.add_parser("metrics", help="print MSE, PSNR, SSIM and VIF for an image pair (b is the reference)")
    p.add_argument("--a", required=True)
    p.add_argument("--b", required=True)
    p.set_defaults(func=_cmd_metrics)

    p = sub.add_parser("gridsearch", help="factorial search over loss weights and learning rates")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--grid", required=True)
    p.set_defaults(func=_cmd_gridsearch)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, synth.FilterConfigError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingDivergence as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (synth.DataError, CheckpointError, metrics.MetricShapeError, metrics.MetricDomainError,
            OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
