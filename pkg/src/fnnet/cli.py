"""Command-line interface: dataset generation, training, evaluation, and
the RANSAC baseline.

Exit codes: 0 success, 1 usage error, 2 data or contract error.
"""

from __future__ import annotations

import argparse
import json
import sys

from . import datagen, pipeline
from . import model as fnmodel
from .datagen import DatagenError, NoiseConfig
from .diffcore import DiffcoreError
from .geometry import GeometryError
from .model import FNNetConfig


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(f"{message}\n{self.format_usage()}")


def _build_parser():
    parser = _Parser(prog="fnnet", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("generate", help="generate a synthetic dataset")
    gen.add_argument("--seed", type=int, required=True)
    gen.add_argument("--pairs", type=int, required=True)
    gen.add_argument("--n-points", type=int, default=512)
    gen.add_argument("--outlier-ratio", type=float, default=0.5)
    gen.add_argument("--jitter-px", type=float, default=0.5)
    gen.add_argument("--drift-fraction", type=float, default=0.5)
    gen.add_argument("--drift-px", type=float, default=25.0)
    gen.add_argument("--out", required=True)

    tr = sub.add_parser("train", help="train the filtering network")
    tr.add_argument("--data", required=True)
    tr.add_argument("--val", required=True)
    tr.add_argument("--config", help="JSON file mirroring the model config fields")
    tr.add_argument("--epochs", type=int, default=20)
    tr.add_argument("--seed", type=int, default=0)
    tr.add_argument("--lr", type=float, default=1e-3)
    tr.add_argument("--out", required=True)

    ev = sub.add_parser("eval", help="evaluate a checkpoint")
    ev.add_argument("--data", required=True)
    ev.add_argument("--ckpt", required=True)
    ev.add_argument("--ransac-post", action="store_true")
    ev.add_argument("--report")

    base = sub.add_parser("baseline", help="plain RANSAC baseline")
    base.add_argument("--data", required=True)
    base.add_argument("--iters", type=int, default=1000)
    base.add_argument("--threshold", type=float, default=1e-4)
    base.add_argument("--seed", type=int, default=0)
    base.add_argument("--report")

    return parser


def _write_report(report, path):
    if path:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(report.to_json() + "\n")


def _cmd_generate(args):
    noise = NoiseConfig(
        n_total=args.n_points,
        outlier_ratio=args.outlier_ratio,
        inlier_jitter_px=args.jitter_px,
        drift_fraction=args.drift_fraction,
        drift_px=args.drift_px,
        seed=args.seed,
    )
    records = datagen.generate_dataset(args.seed, args.pairs, noise)
    datagen.write_dataset(records, args.out)
    print(f"wrote {len(records)} pairs to {args.out}")


def _cmd_train(args):
    config = FNNetConfig()
    if args.config:
        with open(args.config, "r", encoding="utf-8") as fh:
            config = FNNetConfig.from_dict(json.load(fh))
    train_records = datagen.read_dataset(args.data)
    val_records = datagen.read_dataset(args.val)
    pipeline.train(
        train_records,
        val_records,
        config,
        epochs=args.epochs,
        checkpoint_path=args.out,
        seed=args.seed,
        lr=args.lr,
        log_fn=print,
    )
    print(f"checkpoint written to {args.out}")


def _cmd_eval(args):
    records = datagen.read_dataset(args.data)
    model, _ = fnmodel.load_checkpoint(args.ckpt)
    report = pipeline.evaluate(
        records, pipeline.fnnet_predictor(model), use_ransac_post=args.ransac_post
    )
    print(report.summary())
    _write_report(report, args.report)


def _cmd_baseline(args):
    records = datagen.read_dataset(args.data)
    cfg = pipeline.RansacConfig(args.iters, args.threshold, args.seed)
    report = pipeline.evaluate(records, pipeline.ransac_predictor(cfg))
    print(report.summary())
    _write_report(report, args.report)


_COMMANDS = {
    "generate": _cmd_generate,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "baseline": _cmd_baseline,
}


def main(argv=None):
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    try:
        _COMMANDS[args.command](args)
    except (DatagenError, GeometryError, DiffcoreError, OSError,
            json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
