"""Command line entry point: ``phsfl <subcommand> [--config PATH | --preset NAME] ...``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import harness
from .config import PRESETS, ExperimentConfig, parse_config, preset
from .orchestrator import MODES

SUBCOMMANDS = ("train", "finetune", "eval", "bound", "comm", "partition", "gradcheck")
SEED_ENV = "PHSFL_SEED"


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="phsfl", description="Hierarchical split federated learning simulator")
    p.add_argument("command", choices=SUBCOMMANDS)
    src = p.add_mutually_exclusive_group()
    src.add_argument("--config", type=Path, help="YAML experiment config")
    src.add_argument("--preset", choices=PRESETS)
    p.add_argument("--seed", type=int, help=f"overrides the config seed (and ${SEED_ENV})")
    p.add_argument("--out", type=Path, help="output root directory")
    p.add_argument("--mode", choices=MODES)
    p.add_argument("--checkpoint", type=Path, help="model file for finetune/eval/bound")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def load(args) -> ExperimentConfig:
    if args.config:
        cfg = parse_config(args.config.read_text())
    elif args.preset:
        cfg = preset(args.preset)
    else:
        cfg = ExperimentConfig()
    seed = args.seed
    if seed is None and os.environ.get(SEED_ENV):
        seed = int(os.environ[SEED_ENV])
    if seed is not None and not 0 <= seed < 2**64:
        raise ValueError("seed must be an unsigned 64-bit integer")
    return harness.with_overrides(cfg, seed=seed, out=args.out, mode=args.mode)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load(args)
        cmd = args.command
        if cmd == "train":
            res = harness.cmd_train(cfg)
        elif cmd == "finetune":
            res = harness.cmd_finetune(cfg, args.checkpoint)
        elif cmd == "eval":
            res = harness.cmd_eval(cfg, args.checkpoint)
        elif cmd == "bound":
            res = harness.cmd_bound(cfg, args.checkpoint)
        elif cmd == "comm":
            res = harness.cmd_comm(cfg)
        elif cmd == "partition":
            res = harness.cmd_partition(cfg)
        else:
            res = harness.cmd_gradcheck(cfg)
            if not res["passed"]:
                print(json.dumps(res, sort_keys=True))
                return 1
    except Exception as e:  # report every failure as one JSON record
        record = {"error": type(e).__name__, "message": str(e), "command": args.command}
        if getattr(e, "path", None):
            record["path"] = e.path
        print(json.dumps(record, sort_keys=True), file=sys.stderr)
        return 2
    res["artifacts"] = str(harness.artifact_dir(cfg))
    print(json.dumps(res, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
