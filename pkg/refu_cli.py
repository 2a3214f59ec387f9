"""
Command line entry point.

Usage:
    python refu_cli.py gen-data  --config exp.json --seed 0 --out runs/exp
    python refu_cli.py train-sdf --config exp.json [--resume]
    python refu_cli.py train     --config exp.json
    python refu_cli.py eval      --config exp.json [--timings]
    python refu_cli.py report    --out runs/exp
    python refu_cli.py wedge     --seed 0 [--variant main]

Every subcommand takes `--config`, `--seed` and `--out`; the last two override the
config file. Logging goes to stdout as JSON and, when REFU_LOG_FILEPATH is set, to a
dated log file.
"""
import argparse
import sys
from dataclasses import asdict
from typing import List, Optional

from experiment import (build_report, config_hash, gen_data, load_config, run_experiment, run_wedge_ablation,
                        train_sdf_stage, train_stage)
from logger import setup_logger
from refu_datatypes import AlphaVariant
from settings import LOG_FILEPATH, NUM_WORKERS, float_dtype, log_level

COMMANDS = ("gen-data", "train-sdf", "train", "eval", "report", "wedge")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="refu_cli", description="SDF-based garment collision handling experiments")
    commands = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sub = commands.add_parser(name)
        sub.add_argument("--config", default=None, help="experiment config JSON (desk preset when omitted)")
        sub.add_argument("--seed", type=int, default=None, help="root seed, overrides the config")
        sub.add_argument("--out", default=None, help="output directory, overrides the config")
        sub.add_argument("--progress", action="store_true", help="show progress bars")
        if name == "train-sdf":
            sub.add_argument("--resume", action="store_true", help="continue from sdf_state.json")
        if name == "eval":
            sub.add_argument("--timings", action="store_true", help="fill the per-stage timing columns")
            sub.add_argument("--workers", type=int, default=NUM_WORKERS, help="frames evaluated in parallel")
        if name == "wedge":
            sub.add_argument("--variant", choices=[v.value for v in AlphaVariant], default=AlphaVariant.MAIN.value)
            sub.add_argument("--steps", type=int, default=400)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logger = setup_logger("refu", LOG_FILEPATH, log_level())
    try:
        dtype = float_dtype()
        if args.command == "wedge":
            result = run_wedge_ablation(seed=args.seed or 0, variant=AlphaVariant(args.variant), steps=args.steps)
            fields = asdict(result)
            fields.pop("curve")
            logger.info("Wedge ablation finished", extra={"fields": fields})
            return 0
        if args.command == "report":
            if args.out is None:
                args.out = load_config(args.config).output_dir
            rows = build_report(args.out)
            logger.info("Report written", extra={"fields": {"rows": len(rows), "output_dir": args.out}})
            return 0

        cfg = load_config(args.config, args.seed, args.out)
        logger.info("Running %s", args.command, extra={"fields": {
            "config_hash": config_hash(cfg), "seed": cfg.seed, "method": cfg.method.value,
            "sdf_mode": cfg.sdf_mode.value, "output_dir": cfg.output_dir, "dtype": dtype.name}})
        if args.command == "gen-data":
            gen_data(cfg)
        elif args.command == "train-sdf":
            train_sdf_stage(cfg, resume=args.resume, progress=args.progress)
        elif args.command == "train":
            train_stage(cfg, progress=args.progress)
        elif args.command == "eval":
            run_experiment(cfg, timings=args.timings, workers=max(1, args.workers))
        return 0
    except KeyboardInterrupt:
        logger.warning("Interrupted")
        return 130
    except Exception as e:
        logger.error(f"{args.command} failed: {e}", exc_info=True)
        raise


if __name__ == "__main__":
    sys.exit(main())
