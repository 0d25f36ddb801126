"""Command line interface: run, compare, preset.

Exit codes: 0 success, 2 config error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .appset import AppCostError
from .experiment import PRESETS, ConfigError, ExperimentConfig, compare_methods, run_experiment
from .mpc import ClosedLoopError, QpConvergenceError, QpInfeasibleError, SingularKktError

NUMERICAL_ERRORS = (
    ClosedLoopError,
    QpInfeasibleError,
    QpConvergenceError,
    SingularKktError,
    AppCostError,
    np.linalg.LinAlgError,
    FloatingPointError,
)


def _apply_overrides(config: ExperimentConfig, args: argparse.Namespace) -> ExperimentConfig:
    if getattr(args, "seed", None) is not None:
        if config.scenario is None:
            raise ConfigError("--seed given but the config has no scenario block")
        config.scenario.seed = args.seed
    if getattr(args, "samples", None) is not None:
        if config.scenario is None:
            raise ConfigError("--samples given but the config has no scenario block")
        if args.samples < 1:
            raise ConfigError("--samples must be >= 1")
        config.scenario.n_samples = args.samples
    if getattr(args, "order", None) is not None:
        config.sensitivity_order = args.order
    config.validate()
    return config


def _out_dir(config: ExperimentConfig, args: argparse.Namespace) -> Path:
    if getattr(args, "out", None):
        return Path(args.out)
    if config.output_dir:
        return Path(config.output_dir)
    return Path("appset-out")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mpc-appset", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--out", help="output directory (overrides the config's output_dir)")
        p.add_argument("--seed", type=int, help="override the scenario sampling seed")
        p.add_argument("--samples", type=int, help="override the scenario sample count")
        p.add_argument("--order", type=int, choices=(1, 2), help="sensitivity order")

    p_run = sub.add_parser("run", help="run the full experiment pipeline")
    p_run.add_argument("config", help="path to the experiment config (JSON)")
    add_common(p_run)

    p_cmp = sub.add_parser("compare", help="compare perturbation vs finite-difference Hessians")
    p_cmp.add_argument("config", help="path to the experiment config (JSON)")
    add_common(p_cmp)

    p_pre = sub.add_parser("preset", help="write a bundled preset config")
    p_pre.add_argument("name", choices=sorted(PRESETS))
    p_pre.add_argument("--out", required=True, help="directory to write config.json into")
    p_pre.add_argument("--seed", type=int, help="override the scenario sampling seed")
    p_pre.add_argument("--samples", type=int, help="override the scenario sample count")
    p_pre.add_argument("--order", type=int, choices=(1, 2), help="sensitivity order")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "preset":
            config = _apply_overrides(PRESETS[args.name](), args)
            out = Path(args.out)
            out.mkdir(parents=True, exist_ok=True)
            config.save(out / "config.json")
            print(f"wrote {out / 'config.json'}")
            return 0
        config = _apply_overrides(ExperimentConfig.load(args.config), args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2

    out = _out_dir(config, args)
    try:
        if args.command == "run":
            report = run_experiment(config, out)
            print(json.dumps(report, indent=2, sort_keys=True))
        else:
            report = compare_methods(config, out)
            print(json.dumps(report, indent=2, sort_keys=True))
    except NUMERICAL_ERRORS as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
