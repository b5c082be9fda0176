"""Command-line entry point: ``prunedistill <command> [--config PATH] [--seed N] [--out DIR]``."""

from __future__ import annotations

import argparse
import json
import sys

from . import pipeline
from .autodiff import ContractError
from .checkpoint import CheckpointError
from .cka import DegenerateRepresentation
from .model import ConfigError

EXIT_OK, EXIT_CONTRACT, EXIT_IO = 0, 1, 2


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config; omitted keys take built-in defaults")
    common.add_argument("--seed", type=int, help="master seed (overrides the config)")
    common.add_argument("--out", default="out", help="output directory (default: out)")

    p = argparse.ArgumentParser(prog="prunedistill",
                                description="Prune, distill and compare toy document models.")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[common], help="write dataset manifests")
    t = sub.add_parser("train", parents=[common], help="train one variant")
    t.add_argument("variant", choices=pipeline.VARIANTS)
    e = sub.add_parser("evaluate", parents=[common], help="score a variant on a split")
    e.add_argument("variant", choices=pipeline.VARIANTS)
    e.add_argument("task", choices=pipeline.TASKS)
    e.add_argument("split", choices=pipeline.SPLITS)
    c = sub.add_parser("cka", parents=[common], help="layerwise CKA between two variants")
    c.add_argument("a", choices=pipeline.VARIANTS)
    c.add_argument("b", choices=pipeline.VARIANTS)
    sub.add_parser("report", parents=[common], help="write summary tables from the ledger")
    sub.add_parser("run-all", parents=[common], help="every command above, in order")
    sub.add_parser("show-config", parents=[common], help="print the effective config")
    return p


def run(args: argparse.Namespace) -> object:
    cfg = pipeline.ExperimentConfig.load(args.config, seed=args.seed)
    if args.command == "show-config":
        return cfg.raw
    if args.command == "gen-data":
        return [str(p) for p in pipeline.cmd_gen_data(cfg, args.out)]
    if args.command == "train":
        return pipeline.cmd_train(cfg, args.out, args.variant)
    if args.command == "evaluate":
        return pipeline.cmd_evaluate(cfg, args.out, args.variant, args.task, args.split)
    if args.command == "cka":
        return pipeline.cmd_cka(cfg, args.out, args.a, args.b)
    if args.command == "report":
        return pipeline.cmd_report(cfg, args.out)
    if args.command == "run-all":
        res = pipeline.run_all(cfg, args.out, log=lambda s: print(s, file=sys.stderr))
        return {" ".join(map(str, k)): v for k, v in res.items()}
    raise AssertionError(args.command)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        result = run(args)
    except (ContractError, ConfigError, DegenerateRepresentation) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONTRACT
    except (OSError, CheckpointError) as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return EXIT_IO
    print(json.dumps(result, indent=2, sort_keys=True, default=str))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
