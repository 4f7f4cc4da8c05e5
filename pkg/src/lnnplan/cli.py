"""Command-line entry point: ``python -m lnnplan <command> --config c.toml``."""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

import numpy as np

from . import harness as hn
from . import planner as pl
from . import training as tr

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3

log = logging.getLogger("lnnplan")


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="TOML experiment config")
    common.add_argument("--seed", type=int, default=None, help="override the seed list with one seed")
    common.add_argument("--out", default=None, help="output directory (or file for gen-data)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="lnnplan", description=__doc__)
    sub = p.add_subparsers(dest="command", metavar="command")
    sub.required = True
    sub.add_parser("gen-data", parents=[common], help="simulate and write a transition dataset")
    t = sub.add_parser("train", parents=[common], help="train every configured model kind and seed")
    t.add_argument("--data", default=None, help="dataset file from gen-data (default: regenerate)")
    sub.add_parser("eval-rollout", parents=[common], help="open-loop prediction error of checkpoints")
    sub.add_parser("plan", parents=[common], help="closed-loop planner evaluation")
    b = sub.add_parser("bench", parents=[common], help="run one benchmark experiment")
    b.add_argument("experiment", choices=hn.EXPERIMENTS)
    return p


def _load(args) -> hn.ExperimentConfig:
    cfg = hn.load_config(args.config)
    changes = {}
    if args.seed is not None:
        changes["seeds"] = [args.seed]
    if args.out is not None and args.command != "gen-data":
        changes["output_dir"] = args.out
    return dataclasses.replace(cfg, **changes) if changes else cfg


def _report(report: hn.BenchReport, cfg) -> None:
    for p in report.write(cfg.output_dir):
        print(p)


def _run(args) -> int:
    cfg = _load(args)
    cmd = args.command
    if cmd == "gen-data":
        seed = cfg.seeds[0]
        ds = hn.dataset_for_seed(cfg, seed)
        out = Path(args.out) if args.out else Path(cfg.output_dir) / f"{cfg.system.kind}_seed{seed}.lds"
        out.parent.mkdir(parents=True, exist_ok=True)
        tr.save_dataset(out, ds)
        print(out)
    elif cmd == "train":
        ds = tr.load_dataset(args.data) if args.data else None
        if ds is not None and ds.kind != cfg.system.kind:
            raise hn.ConfigError(f"dataset {args.data} holds {ds.kind}, config says {cfg.system.kind}")
        trained, _ = hn.train_models(cfg, dataset=ds)
        for kind, seed in trained:
            print(hn.checkpoint_path(cfg, kind, seed))
    elif cmd == "eval-rollout":
        _report(hn.run_prediction_error(cfg), cfg)
    elif cmd == "plan":
        _report(hn.run_planner_eval(cfg), cfg)
    else:
        _report(hn.RUNNERS[args.experiment](cfg), cfg)
    return EXIT_OK


def cli_main(argv=None) -> int:
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:  # argparse prints usage itself
        return EXIT_OK if e.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _run(args)
    except (pl.PlanningFailure, FloatingPointError, np.linalg.LinAlgError) as err:
        print(f"numerical failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, OSError) as err:
        # ConfigError, contract violations, unreadable or malformed input files
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
