"""Benchmark harness: noise sweeps over matched and rotated-model settings.

Configuration files hold one ``key = value`` pair per line; values are
Python literals (numbers, quoted strings, lists, ``None``) and ``#`` starts
a comment. Every key is optional:

==========================  =============================  ====================================
key                         default                        meaning
==========================  =============================  ====================================
``seed``                    ``0``                          base seed for init, training, tests
``horizon``                 ``100``                        control horizon T
``noise_db``                ``[-10, -5, 0, 5, 10]``        sweep of σ_w² = σ_v² in dB
``x0``                      ``[10.0, 0.0]``                initial state
``test_seeds``              ``1000``                       test trajectories per grid cell
``prior_variance``          ``1e-6``                       model-based filter prior variance
``workers``                 ``1``                          parallel grid-cell processes
``out``                     ``"results"``                  output directory
``design.F/G/H``            double integrator              design matrices (nested lists)
``mismatch.target``         ``"none"``                     ``none``, ``evolution`` or ``observation``
``mismatch.alpha``          ``20.0``                       rotation angle in degrees
``cost.state_weight``       ``1.0``                        Q = w I
``cost.final_weight``       ``1.0``                        Q_T = w I
``cost.control_weight``     ``1.0``                        R = w I
``train.learning_rate``     ``0.001``                      see :class:`TrainConfig`
``train.iterations``        ``300``
``train.batch_size``        ``32``
``train.regularization``    ``0.0001``
``train.optimizer``         ``"adam"``
``train.clip_norm``         ``10.0``                       ``None`` disables clipping
``train.x0_std``            ``1.0``                        initial-state spread while training
``train.checkpoint_every``  ``0``
``train.embed_size``        ``None``                       ``None`` means 10 (m + n)
``train.hidden_size``       ``None``
==========================  =============================  ====================================

The noise sweep values are repository defaults.

``results.csv`` columns: ``setting, noise_db, controller, lqg_loss_db,
state_mse_db, lqg_halfwidth_db, mse_halfwidth_db``. Halfwidths are 95%
normal-approximation intervals of the mean, carried to dB by the delta
method. Controllers are ``model-based``, ``learned`` and, when the truth
differs from the design, ``optimal`` (filter and regulator built on the
true model).
"""
from __future__ import annotations

import ast
import csv
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .closed_loop import Controller, Trajectory, evaluate, plain, rollout, to_db, write_trajectory_csv
from .dynamics import (
    BatchSimulator,
    MismatchSpec,
    MismatchTarget,
    NoiseSpec,
    StateSpaceModel,
    apply_mismatch,
    design_model,
    noise_covariances,
    trajectory_seeds,
)
from .estimation import DEFAULT_PRIOR_VARIANCE
from .gainnet import ArchConfig, GainNetParams
from .regulation import QuadraticCost
from .training import TrainConfig, TrainingAborted, TrainReport, simulator_factory, train

log = logging.getLogger(__name__)

SETTINGS = {
    "matched": MismatchTarget.NONE,
    "mismatch-f": MismatchTarget.EVOLUTION,
    "mismatch-h": MismatchTarget.OBSERVATION,
}
SETTING_NAMES = {target: name for name, target in SETTINGS.items()}
RESULTS_HEADER = ["setting", "noise_db", "controller", "lqg_loss_db", "state_mse_db",
                  "lqg_halfwidth_db", "mse_halfwidth_db"]
# Training draws its batches from streams 1, 2, ...; tests use stream 0.
TEST_STREAM = 0
Z95 = 1.959963984540054


class ConfigError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        super().__init__(f"line {line}: {message}" if line is not None else message)
        self.line = line


class ExperimentError(RuntimeError):
    """A grid cell failed numerically; carries the cell for context."""

    def __init__(self, setting: str, noise_db: float, cause: Exception):
        super().__init__(f"setting {setting}, noise {noise_db} dB: {cause}")
        self.setting, self.noise_db = setting, noise_db


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    horizon: int = 100
    noise_db: tuple = (-10.0, -5.0, 0.0, 5.0, 10.0)
    x0: tuple = (10.0, 0.0)
    test_seeds: int = 1000
    prior_variance: float = DEFAULT_PRIOR_VARIANCE
    workers: int = 1
    out: str = "results"
    design_F: tuple | None = None
    design_G: tuple | None = None
    design_H: tuple | None = None
    mismatch: MismatchSpec = field(default_factory=lambda: MismatchSpec(MismatchTarget.NONE, 20.0))
    state_weight: float = 1.0
    final_weight: float = 1.0
    control_weight: float = 1.0
    train: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self):
        if self.seed < 0:
            raise ConfigError(f"seed must be non-negative, got {self.seed}")
        if self.horizon < 0:
            raise ConfigError(f"horizon must be non-negative, got {self.horizon}")
        if self.test_seeds < 2:
            raise ConfigError(f"need at least 2 test seeds for a confidence interval, got {self.test_seeds}")
        if self.workers < 1:
            raise ConfigError(f"workers must be at least 1, got {self.workers}")
        if not self.prior_variance > 0:
            raise ConfigError(f"prior variance must be positive, got {self.prior_variance}")
        try:
            self.cost()
            model = self.design_model(0.0)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if len(self.x0) != model.m:
            raise ConfigError(f"x0 has {len(self.x0)} entries, the design state has {model.m}")

    @property
    def setting(self) -> str:
        return SETTING_NAMES[self.mismatch.target]

    def with_setting(self, setting: str) -> "ExperimentConfig":
        if setting not in SETTINGS:
            raise ConfigError(f"unknown setting {setting!r}; choose from {sorted(SETTINGS)}")
        return replace(self, mismatch=replace(self.mismatch, target=SETTINGS[setting]))

    def design_model(self, noise_db: float) -> StateSpaceModel:
        base = design_model()
        F = base.F if self.design_F is None else np.array(self.design_F, dtype=float)
        G = base.G if self.design_G is None else np.array(self.design_G, dtype=float)
        H = base.H if self.design_H is None else np.array(self.design_H, dtype=float)
        W, V = noise_covariances(NoiseSpec.equal(noise_db), F.shape[0], H.shape[0])
        return StateSpaceModel(F, G, H, W, V)

    def truth_model(self, noise_db: float) -> StateSpaceModel:
        return apply_mismatch(self.design_model(noise_db), self.mismatch)

    def cost(self) -> QuadraticCost:
        m, q = self.design_model(0.0).m, self.design_model(0.0).q
        return QuadraticCost(self.state_weight * np.eye(m), self.final_weight * np.eye(m),
                             self.control_weight * np.eye(q), self.horizon)

    def test_seed_list(self) -> list:
        return trajectory_seeds(self.seed, self.test_seeds, stream=TEST_STREAM)


# ---------------------------------------------------------------- parsing

def _number(v):
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ValueError(f"expected a number, got {v!r}")
    if not math.isfinite(v):
        raise ValueError(f"expected a finite number, got {v!r}")
    return float(v)


def _integer(v):
    if isinstance(v, bool) or not isinstance(v, int):
        raise ValueError(f"expected an integer, got {v!r}")
    return v


def _optional(conv):
    return lambda v: None if v is None else conv(v)


def _numbers(v):
    if not isinstance(v, (list, tuple)):
        raise ValueError(f"expected a list of numbers, got {v!r}")
    return tuple(_number(x) for x in v)


def _matrix(v):
    if not isinstance(v, (list, tuple)) or not v:
        raise ValueError(f"expected a nested list of numbers, got {v!r}")
    rows = tuple(_numbers(r) for r in v)
    if len({len(r) for r in rows}) != 1:
        raise ValueError("matrix rows have unequal lengths")
    return rows


def _choice(options):
    def conv(v):
        if v not in options:
            raise ValueError(f"expected one of {sorted(options)}, got {v!r}")
        return v
    return conv


def _text(v):
    if not isinstance(v, str):
        raise ValueError(f"expected a quoted string, got {v!r}")
    return v


# key -> (section, field, converter); section None is the top level
_KEYS = {
    "seed": (None, "seed", _integer),
    "horizon": (None, "horizon", _integer),
    "noise_db": (None, "noise_db", _numbers),
    "x0": (None, "x0", _numbers),
    "test_seeds": (None, "test_seeds", _integer),
    "prior_variance": (None, "prior_variance", _number),
    "workers": (None, "workers", _integer),
    "out": (None, "out", _text),
    "design.F": (None, "design_F", _matrix),
    "design.G": (None, "design_G", _matrix),
    "design.H": (None, "design_H", _matrix),
    "mismatch.target": ("mismatch", "target", _choice({t.value for t in MismatchTarget})),
    "mismatch.alpha": ("mismatch", "alpha_degrees", _number),
    "cost.state_weight": (None, "state_weight", _number),
    "cost.final_weight": (None, "final_weight", _number),
    "cost.control_weight": (None, "control_weight", _number),
    "train.learning_rate": ("train", "learning_rate", _number),
    "train.iterations": ("train", "iterations", _integer),
    "train.batch_size": ("train", "batch_size", _integer),
    "train.regularization": ("train", "regularization", _number),
    "train.optimizer": ("train", "optimizer", _choice({"adam", "sgd"})),
    "train.clip_norm": ("train", "clip_norm", _optional(_number)),
    "train.x0_std": ("train", "x0_std", _number),
    "train.checkpoint_every": ("train", "checkpoint_every", _integer),
    "train.embed_size": ("arch", "embed_size", _optional(_integer)),
    "train.hidden_size": ("arch", "hidden_size", _optional(_integer)),
}


def parse_config_text(text: str) -> ExperimentConfig:
    """Strict parse of ``key = value`` lines; see the module docstring for keys."""
    sections = {None: {}, "mismatch": {}, "train": {}, "arch": {}}
    lines = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep:
            raise ConfigError(f"expected 'key = value', got {line!r}", lineno)
        if key not in _KEYS:
            raise ConfigError(f"unknown key {key!r}", lineno)
        if key in lines:
            raise ConfigError(f"duplicate key {key!r} (first set on line {lines[key]})", lineno)
        section, name, conv = _KEYS[key]
        try:
            literal = ast.literal_eval(value.strip())
        except (ValueError, SyntaxError):
            raise ConfigError(f"malformed value for {key}: {value.strip()!r}", lineno) from None
        try:
            sections[section][name] = conv(literal)
        except ValueError as exc:
            raise ConfigError(f"bad value for {key}: {exc}", lineno) from None
        lines[key] = lineno
    try:
        arch = ArchConfig(**sections["arch"])
        train_cfg = TrainConfig(**sections["train"], arch=arch)
        mismatch = MismatchSpec(**{"alpha_degrees": 20.0, **sections["mismatch"]})
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return ExperimentConfig(**sections[None], mismatch=mismatch, train=train_cfg)


def parse_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except (OSError, UnicodeDecodeError) as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from None
    return parse_config_text(text)


# ---------------------------------------------------------------- results

@dataclass(frozen=True)
class ResultRow:
    setting: str
    noise_db: float
    controller: str
    lqg_loss_db: float
    state_mse_db: float
    lqg_halfwidth_db: float
    mse_halfwidth_db: float


def mean_db(values) -> tuple[float, float]:
    """Mean in dB and its 95% halfwidth in dB (delta method)."""
    values = np.asarray(values, dtype=float)
    mean = float(values.mean())
    rel = Z95 * float(values.std(ddof=1)) / math.sqrt(values.size) / mean
    return to_db(mean), 10.0 / math.log(10.0) * rel


def summarize(setting: str, noise_db: float, controller: str, losses, mses) -> ResultRow:
    loss_db, loss_hw = mean_db(losses)
    mse_db, mse_hw = mean_db(mses)
    return ResultRow(setting, float(noise_db), controller, loss_db, mse_db, loss_hw, mse_hw)


class ResultsTable:
    def __init__(self, rows=()):
        self.rows = list(rows)

    def __len__(self):
        return len(self.rows)

    def get(self, setting: str, noise_db: float, controller: str) -> ResultRow:
        for row in self.rows:
            if (row.setting, row.noise_db, row.controller) == (setting, float(noise_db), controller):
                return row
        raise KeyError((setting, noise_db, controller))

    def write_csv(self, path) -> None:
        with open(Path(path), "w", newline="", encoding="ascii") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(RESULTS_HEADER)
            for r in self.rows:
                writer.writerow([r.setting, plain(r.noise_db), r.controller, plain(r.lqg_loss_db),
                                 plain(r.state_mse_db), plain(r.lqg_halfwidth_db), plain(r.mse_halfwidth_db)])


# ---------------------------------------------------------------- grid cells

def train_cell(cfg: ExperimentConfig, noise_db: float, checkpoint_dir=None) -> TrainReport:
    """Train the gain network against the (possibly rotated) true model."""
    design, truth = cfg.design_model(noise_db), cfg.truth_model(noise_db)
    try:
        return train(design, simulator_factory(truth, cfg.x0, cfg.train.x0_std), cfg.cost(), cfg.train,
                     cfg.x0, checkpoint_dir=checkpoint_dir)
    except (TrainingAborted, ArithmeticError) as exc:
        raise ExperimentError(cfg.setting, noise_db, exc) from exc


def controllers(cfg: ExperimentConfig, noise_db: float, params: GainNetParams | None) -> dict:
    """Named controllers for a cell; ``optimal`` only when the truth differs from the design."""
    design, truth, cost = cfg.design_model(noise_db), cfg.truth_model(noise_db), cfg.cost()
    out = {}
    if truth != design:
        out["optimal"] = Controller.model_based(truth, cost, cfg.x0, cfg.prior_variance)
    out["model-based"] = Controller.model_based(design, cost, cfg.x0, cfg.prior_variance)
    if params is not None:
        out["learned"] = Controller.learned(design, cost, params, cfg.x0)
    return out


def evaluate_cell(cfg: ExperimentConfig, noise_db: float, params: GainNetParams | None) -> list[ResultRow]:
    truth, cost, seeds = cfg.truth_model(noise_db), cfg.cost(), cfg.test_seed_list()
    rows = []
    for name, ctrl in controllers(cfg, noise_db, params).items():
        try:
            with np.errstate(over="raise", invalid="raise"):
                losses, mses = evaluate(ctrl, truth, cost, seeds)
            rows.append(summarize(cfg.setting, noise_db, name, losses, mses))
        except (ArithmeticError, ValueError) as exc:
            raise ExperimentError(cfg.setting, noise_db, exc) from exc
    return rows


def cell_label(setting: str, noise_db: float) -> str:
    return f"{setting}_{plain(noise_db)}dB"


def run_cell(cfg: ExperimentConfig, noise_db: float, checkpoint_dir=None):
    """Train then test one (setting, noise) cell; returns (rows, report)."""
    log.info("cell %s: training", cell_label(cfg.setting, noise_db))
    report = train_cell(cfg, noise_db)
    rows = evaluate_cell(cfg, noise_db, report.params)
    if checkpoint_dir is not None:
        checkpoint_dir = Path(checkpoint_dir)
        checkpoint_dir.mkdir(parents=True, exist_ok=True)
        label = cell_label(cfg.setting, noise_db)
        report.params.save(checkpoint_dir / f"{label}.json")
        report.write_curve(checkpoint_dir / f"train_curve_{label}.csv")
    for row in rows:
        log.info("  %-12s loss %.2f dB  mse %.2f dB", row.controller, row.lqg_loss_db, row.state_mse_db)
    return rows, report


def _run_cell_job(job):
    cfg, noise_db, checkpoint_dir = job
    return run_cell(cfg, noise_db, checkpoint_dir)[0]


def run_experiment(cfg: ExperimentConfig, settings=None, checkpoint_dir=None) -> ResultsTable:
    """Noise sweep over the given settings (default: the config's own).

    Cells are independent and seeded from the config alone, so the table
    does not depend on ``cfg.workers``.
    """
    settings = [cfg.setting] if settings is None else list(settings)
    jobs = [(cfg.with_setting(s), db, checkpoint_dir) for s in settings for db in cfg.noise_db]
    if cfg.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=min(cfg.workers, len(jobs))) as pool:
            results = list(pool.map(_run_cell_job, jobs))
    else:
        results = [_run_cell_job(job) for job in jobs]
    return ResultsTable(row for rows in results for row in rows)


# ---------------------------------------------------------------- trajectories

def simulate(cfg: ExperimentConfig, noise_db: float, params: GainNetParams | None = None,
             seed: np.random.SeedSequence | None = None) -> dict[str, Trajectory]:
    """Single-trajectory rollouts of every available controller on one shared seed."""
    seed = cfg.test_seed_list()[0] if seed is None else seed
    truth, cost = cfg.truth_model(noise_db), cfg.cost()
    return {name: rollout(ctrl, BatchSimulator(truth, cfg.x0, [seed]), cost)
            for name, ctrl in controllers(cfg, noise_db, params).items()}


def write_trajectories(trajs: dict[str, Trajectory], out_dir) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for name, traj in trajs.items():
        path = out_dir / f"trajectory_{name}.csv"
        write_trajectory_csv(traj, path)
        paths.append(path)
    return paths


def run_trajectory_demo(cfg: ExperimentConfig, out_dir=None, params: GainNetParams | None = None):
    """Train at the single configured noise level, then trace all controllers on one seed.

    Returns ``(trajectories, params)``; CSV files are written when
    ``out_dir`` is given.
    """
    if len(cfg.noise_db) != 1:
        raise ConfigError(f"the trajectory demo needs exactly one noise level, got {list(cfg.noise_db)}")
    noise_db = cfg.noise_db[0]
    if params is None:
        params = train_cell(cfg, noise_db).params
    trajs = simulate(cfg, noise_db, params)
    if out_dir is not None:
        write_trajectories(trajs, out_dir)
    return trajs, params
