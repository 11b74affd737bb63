"""Command line entry point: ``tagfex run|ablate|analyze|prune``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace

import torch

from .checkpoint import CheckpointError
from .config import OUTPUT_ROOT_ENV, ConfigError, load_config
from .experiment import ConfigMismatchError, ablate, analyze, prune_run, run


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tagfex", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress")
    parser.add_argument("--threads", type=int, default=1,
                        help="torch intra-op threads (default 1, keeps runs reproducible)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="train one configuration")
    p.add_argument("--config", required=True, help="YAML experiment config")
    p.add_argument("--seed", type=int, default=None, help="override config seed")
    p.add_argument("--out", default=None,
                   help=f"run directory (default: ${OUTPUT_ROOT_ENV}/<name>-s<seed>)")
    p.add_argument("--no-resume", action="store_true",
                   help="ignore existing checkpoints in the run directory")

    p = sub.add_parser("ablate", help="train the ablation grid of a configuration")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=None)

    p = sub.add_parser("analyze", help="re-emit metrics and CKA from a run's checkpoints")
    p.add_argument("--run", required=True, dest="run_dir")

    p = sub.add_parser("prune", help="prune a finished run's extractors")
    p.add_argument("--run", required=True, dest="run_dir")
    p.add_argument("--rate", required=True, type=float)
    p.add_argument("--mode", default="fpgm", choices=("fpgm", "pairwise"))
    return parser


def _config(args):
    config = load_config(args.config)
    if args.seed is not None:
        config = replace(config, seed=args.seed)
    return config


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    torch.set_num_threads(args.threads)
    try:
        if args.command == "run":
            result = run(_config(args), args.out, resume=not args.no_resume)
            print(f"{result.out_dir}: last={result.last:.4f}")
        elif args.command == "ablate":
            for row in ablate(_config(args), args.out):
                print(f"{row['name']}: avg={row['avg']:.4f} last={row['last']:.4f} "
                      f"cka={row['cka']:.4f}")
        elif args.command == "analyze":
            metrics = analyze(args.run_dir)
            print(json.dumps({k: metrics[k] for k in ("avg", "last", "accuracies")}))
        elif args.command == "prune":
            summary = prune_run(args.run_dir, args.rate, args.mode)
            print(json.dumps(summary, sort_keys=True))
    except (ConfigError, ConfigMismatchError, CheckpointError, FileNotFoundError) as exc:
        print(f"tagfex: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
