"""Command-line entry point: ``python -m lqgkit <command> [flags]``.

Commands: ``simulate``, ``train``, ``evaluate``, ``grad-check``,
``reproduce`` and ``demo``. Exit status is 0 on success, 2 for
configuration errors and 3 for numerical failures.
"""
from __future__ import annotations

import argparse
import logging
import re
import sys
from dataclasses import replace
from pathlib import Path

from .autodiff import SingularityError
from .bench import (
    SETTINGS,
    ConfigError,
    ExperimentConfig,
    ExperimentError,
    ResultsTable,
    evaluate_cell,
    parse_config,
    run_experiment,
    run_trajectory_demo,
    simulate,
    train_cell,
    write_trajectories,
)
from .gainnet import GainNetParams, init_params
from .training import TrainingAborted, grad_check

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3
GRAD_CHECK_TOLERANCE = 1e-4
log = logging.getLogger("lqgkit")
_NUMBER_LIST = re.compile(r"^[-+]?[\d.]+([eE][-+]?\d+)?(,[-+]?[\d.]*([eE][-+]?\d+)?)*,?$")


def _fold_noise_args(argv: list[str]) -> list[str]:
    """Join the numbers after ``--noise-db`` into one token.

    argparse would read a leading ``-10,0`` as an option flag.
    """
    out, i = [], 0
    while i < len(argv):
        if argv[i] == "--noise-db":
            values = []
            i += 1
            while i < len(argv) and _NUMBER_LIST.match(argv[i]):
                values.append(argv[i].strip(","))
                i += 1
            out.append("--noise-db=" + ",".join(values))
        else:
            out.append(argv[i])
            i += 1
    return out


def _noise_list(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number list: {text!r}") from None


def _seed(text: str) -> int:
    value = int(text)
    if not 0 <= value < 2 ** 64:
        raise argparse.ArgumentTypeError(f"seed must be an unsigned 64-bit integer, got {text}")
    return value


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="key = value configuration file")
    common.add_argument("--out", type=Path, help="output directory (default: config 'out')")
    common.add_argument("--seed", type=_seed, help="base seed, overrides the config")
    common.add_argument("--setting", choices=sorted(SETTINGS), help="matched or rotated F / H")
    common.add_argument("--noise-db", type=_noise_list, metavar="DB",
                        help="noise levels in dB, space or comma separated")
    common.add_argument("--quiet", action="store_true", help="only report errors")

    parser = argparse.ArgumentParser(prog="python -m lqgkit", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("simulate", parents=[common], help="roll out controllers and export trajectories")
    p.add_argument("--checkpoint", type=Path, help="gain network to include as 'learned'")
    sub.add_parser("train", parents=[common], help="train the gain network for one grid cell")
    p = sub.add_parser("evaluate", parents=[common], help="test a saved gain network against the model-based controller")
    p.add_argument("--checkpoint", type=Path, required=True)
    sub.add_parser("grad-check", parents=[common], help="tape gradient against finite differences")
    sub.add_parser("reproduce", parents=[common], help="full noise sweep over all settings")
    sub.add_parser("demo", parents=[common], help="single-trajectory comparison (default 0 dB)")
    return parser


def load_config(args) -> ExperimentConfig:
    cfg = parse_config(args.config) if args.config is not None else ExperimentConfig()
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed, train=replace(cfg.train, seed=args.seed))
    if args.setting is not None:
        cfg = cfg.with_setting(args.setting)
    if args.noise_db is not None:
        cfg = replace(cfg, noise_db=tuple(args.noise_db))
    return cfg


def _single_noise(cfg: ExperimentConfig) -> float:
    if not cfg.noise_db:
        raise ConfigError("no noise level given")
    return cfg.noise_db[0]


def _load_params(path: Path) -> GainNetParams:
    try:
        return GainNetParams.load(path)
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot load checkpoint {path}: {exc}") from exc


def run(args) -> int:
    cfg = load_config(args)
    out = Path(args.out if args.out is not None else cfg.out)
    out.mkdir(parents=True, exist_ok=True)

    if args.command == "simulate":
        params = _load_params(args.checkpoint) if args.checkpoint else None
        for path in write_trajectories(simulate(cfg, _single_noise(cfg), params), out):
            log.info("wrote %s", path)
    elif args.command == "train":
        noise_db = _single_noise(cfg)
        report = train_cell(cfg, noise_db, checkpoint_dir=out)
        report.params.save(out / "gainnet.json")
        report.write_curve(out / "train_curve.csv")
        log.info("trained %d iterations in %.1f s; final loss %.2f dB", len(report.losses),
                 report.wall_time, report.losses_db[-1] if report.losses else float("nan"))
    elif args.command == "evaluate":
        params = _load_params(args.checkpoint)
        table = ResultsTable(row for db in cfg.noise_db for row in evaluate_cell(cfg, db, params))
        table.write_csv(out / "results.csv")
    elif args.command == "grad-check":
        noise_db = _single_noise(cfg)
        design = cfg.design_model(noise_db)
        params = init_params(design.m, design.n, cfg.train.arch, seed=cfg.seed)
        err = grad_check(design, cfg.cost(), params, truth=cfg.truth_model(noise_db), x0=cfg.x0, seed=cfg.seed)
        print(f"max relative error {err:.3e} (tolerance {GRAD_CHECK_TOLERANCE:g})")
        if not err < GRAD_CHECK_TOLERANCE:
            return EXIT_NUMERIC
    elif args.command == "reproduce":
        settings = [cfg.setting] if args.setting else list(SETTINGS)
        table = run_experiment(cfg, settings, checkpoint_dir=out / "checkpoints")
        table.write_csv(out / "results.csv")
        log.info("wrote %s (%d rows)", out / "results.csv", len(table))
    elif args.command == "demo":
        if args.noise_db is None:
            cfg = replace(cfg, noise_db=(0.0,))
        _, params = run_trajectory_demo(cfg, out)
        params.save(out / "gainnet.json")
        log.info("wrote trajectories to %s", out)
    return EXIT_OK


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    args = build_parser().parse_args(_fold_noise_args(argv))
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(message)s", stream=sys.stderr)
    try:
        return run(args)
    except ConfigError as exc:
        log.error("configuration error: %s", exc)
        return EXIT_CONFIG
    except (ExperimentError, TrainingAborted, SingularityError, ArithmeticError) as exc:
        log.error("numerical failure: %s", exc)
        return EXIT_NUMERIC
