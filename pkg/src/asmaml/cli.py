"""Command line entry point: ``asmaml {train,evaluate,baseline,export-embeddings,check}``."""

from __future__ import annotations

import argparse
import logging
import sys

import numpy as np
import torch

from . import harness
from .config import load_config
from .errors import ConfigError, DataError, NumericError, ShapeError

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat 'section.key = value' config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="asmaml", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="meta-train and checkpoint")
    _common(p)
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("evaluate", help="test-protocol evaluation of a checkpoint")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="test", choices=["train", "val", "test"])
    p.add_argument("--tasks", type=int)
    p.add_argument("--results", help="append a row to this results CSV")

    p = sub.add_parser("baseline", help="kernel / finetune / prototypical baselines")
    _common(p)
    p.add_argument("--method", required=True, choices=["wl", "sp", "graphlet", "finetune", "proto"])
    p.add_argument("--tasks", type=int)
    p.add_argument("--results", help="append a row to this results CSV")

    p = sub.add_parser("export-embeddings", help="write graph embeddings to CSV")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="test", choices=["train", "val", "test"])
    p.add_argument("--count", type=int, default=400)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    sub.add_parser("check", help="run the built-in oracle and gradient self-checks")
    return parser


def _report(method, cfg, split, res, results_path, seed):
    print(f"{method} {cfg.data.name} {cfg.task.way}-way-{cfg.task.shot}-shot {split}: "
          f"{100 * res.mean:.2f} +- {100 * res.ci95:.2f} (std {100 * res.std:.2f}, {len(res.accuracies)} tasks)")
    if results_path:
        harness.write_result(results_path, method, cfg, split, res, seed)


def run(args: argparse.Namespace) -> int:
    if args.command == "check":
        from .selfcheck import run_checks

        return EXIT_OK if run_checks() else EXIT_NUMERIC
    cfg = load_config(args.config, args.set)
    if args.command == "train":
        res = harness.train(cfg, args.out)
        print(f"trained {res.episodes_run} episodes; best validation {res.best_val:.4f}; "
              f"checkpoints in {res.out_dir}")
    elif args.command == "evaluate":
        res = harness.evaluate(args.checkpoint, cfg, args.split, tasks=args.tasks)
        _report("as-maml", cfg, args.split, res, args.results, cfg.eval.seed)
    elif args.command == "baseline":
        res = harness.run_baseline(args.method, cfg, tasks=args.tasks)
        _report(args.method, cfg, "test", res, args.results, cfg.eval.seed)
    elif args.command == "export-embeddings":
        splits = harness.load_splits(cfg)
        path = harness.export_embeddings(args.checkpoint, cfg, getattr(splits, args.split), args.count,
                                         args.out, args.seed)
        print(f"wrote {path}")
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(1)
    np.set_printoptions(precision=4)
    try:
        return run(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, ShapeError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
