"""Command-line entry point: ``eeg3d <verb> [options]``.

Exit codes: 0 ok, 2 configuration or precondition failure, 3 missing
artifact (unknown segment, absent renders), 4 numerical abort.
"""

from __future__ import annotations

import argparse
import logging
import sys
from typing import Sequence

from .common import NumericalAbort
from .config import ConfigError, check_finite_numbers, load_config, with_overrides
from .pipeline import (EXIT_CONFIG, EXIT_NUMERICAL, EXIT_OK, StageError, cmd_evaluate, cmd_finetune_ldm,
                       cmd_gen_data, cmd_reconstruct_2d, cmd_reconstruct_3d, cmd_train_embedder, cmd_train_stage_a,
                       open_run, quickstart)

VERBS = ("gen-data", "train-stage-a", "finetune-ldm", "train-embedder", "reconstruct-2d", "reconstruct-3d",
         "evaluate", "quickstart")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="eeg3d", description="EEG-conditioned 2D and 3D reconstruction pipeline.")
    sub = p.add_subparsers(dest="verb", required=True)
    for verb in VERBS:
        sp = sub.add_parser(verb)
        sp.add_argument("--config", help="TOML config file (defaults are used when omitted)")
        sp.add_argument("--run-dir", default="runs/default", help="run directory (default: %(default)s)")
        sp.add_argument("--seed", type=int, help="override the config seed")
        sp.add_argument("-v", "--verbose", action="store_true")
        if verb == "finetune-ldm":
            sp.add_argument("--no-region-loss", action="store_true", help="set lambda_region to 0")
        if verb == "reconstruct-3d":
            sp.add_argument("--no-color-loss", action="store_true", help="set w_color to 0")
            sp.add_argument("--no-eeg-text-loss", action="store_true", help="set w_align to 0")
        if verb in ("reconstruct-2d", "reconstruct-3d"):
            sp.add_argument("--segment", required=True, help="segment id to reconstruct")
        if verb == "evaluate":
            sp.add_argument("--split", choices=("train", "val", "test"))
    return p


def _effective_config(args: argparse.Namespace):
    cfg = load_config(args.config)
    over = {}
    if args.seed is not None:
        over["seed"] = args.seed
    if getattr(args, "no_region_loss", False):
        over["ldm.lambda_region"] = 0.0
    if getattr(args, "no_color_loss", False):
        over["stage_b.w_color"] = 0.0
    if getattr(args, "no_eeg_text_loss", False):
        over["stage_b.w_align"] = 0.0
    cfg = with_overrides(cfg, **over) if over else cfg
    check_finite_numbers(cfg)
    return cfg


def run_verb(args: argparse.Namespace) -> None:
    run = open_run(args.run_dir, _effective_config(args))
    verb = args.verb
    if verb == "gen-data":
        cmd_gen_data(run)
    elif verb == "train-stage-a":
        cmd_train_stage_a(run)
    elif verb == "finetune-ldm":
        cmd_finetune_ldm(run)
    elif verb == "train-embedder":
        cmd_train_embedder(run)
    elif verb == "reconstruct-2d":
        cmd_reconstruct_2d(run, args.segment)
    elif verb == "reconstruct-3d":
        cmd_reconstruct_3d(run, args.segment)
    elif verb == "evaluate":
        cmd_evaluate(run, args.split)
    elif verb == "quickstart":
        quickstart(run)


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        run_verb(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except StageError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    except NumericalAbort as e:
        print(f"numerical abort: {e}", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
