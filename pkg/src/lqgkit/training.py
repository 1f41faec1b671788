"""End-to-end training of the gain network on the regularized control loss.

Noise draws are sampled once per rollout and enter the tape as constants,
so each batch loss is a deterministic, differentiable function of the
weights (pathwise gradient).
"""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from .closed_loop import Controller, Trajectory, lqg_loss, plain, rollout, to_db
from .dynamics import BatchSimulator, StateSpaceModel, trajectory_seeds
from .gainnet import ArchConfig, GainNetParams, init_params
from .regulation import QuadraticCost

log = logging.getLogger(__name__)

OPTIMIZERS = ("adam", "sgd")


class TrainingAborted(RuntimeError):
    def __init__(self, message: str, iteration: int):
        super().__init__(f"iteration {iteration}: {message}")
        self.iteration = iteration


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    iterations: int = 300
    batch_size: int = 32
    regularization: float = 1e-4
    optimizer: str = "adam"
    seed: int = 0
    checkpoint_every: int = 0
    clip_norm: float | None = 10.0
    x0_std: float = 1.0
    arch: ArchConfig = field(default_factory=ArchConfig)

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError(f"learning rate must be positive, got {self.learning_rate}")
        if self.iterations < 0:
            raise ValueError(f"iterations must be non-negative, got {self.iterations}")
        if self.batch_size < 1:
            raise ValueError(f"batch size must be at least 1, got {self.batch_size}")
        if self.regularization < 0:
            raise ValueError(f"regularization must be non-negative, got {self.regularization}")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")
        if self.clip_norm is not None and not self.clip_norm > 0:
            raise ValueError(f"clip norm must be positive, got {self.clip_norm}")


@dataclass
class TrainReport:
    params: GainNetParams
    losses: list = field(default_factory=list)
    grad_norms: list = field(default_factory=list)
    wall_time: float = 0.0

    @property
    def losses_db(self) -> list:
        return [to_db(v) for v in self.losses]

    def write_curve(self, path) -> None:
        with open(Path(path), "w", newline="", encoding="ascii") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["iteration", "loss", "loss_db", "grad_norm"])
            for i, (loss, gn) in enumerate(zip(self.losses, self.grad_norms)):
                writer.writerow([i, plain(loss), plain(to_db(loss)), plain(gn)])


class Adam:
    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = self.v = None
        self.t = 0

    def step(self, theta: np.ndarray, grad: np.ndarray) -> np.ndarray:
        if self.m is None:
            self.m = np.zeros_like(theta)
            self.v = np.zeros_like(theta)
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        m_hat = self.m / (1 - self.beta1 ** self.t)
        v_hat = self.v / (1 - self.beta2 ** self.t)
        return theta - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


class SGD:
    def __init__(self, lr: float):
        self.lr = lr

    def step(self, theta: np.ndarray, grad: np.ndarray) -> np.ndarray:
        return theta - self.lr * grad


def make_optimizer(cfg: TrainConfig):
    return Adam(cfg.learning_rate) if cfg.optimizer == "adam" else SGD(cfg.learning_rate)


def regularized_loss(trajs, theta, gamma: float, cost: QuadraticCost):
    """Batch-mean control loss plus γ‖θ‖²."""
    if isinstance(trajs, Trajectory):
        trajs = [trajs]
    per_traj = ad.concat([lqg_loss(tr, cost) for tr in trajs], axis=0) if trajs else None
    reg = ad.mul(ad.sum(ad.square(theta)), float(gamma))
    if per_traj is None:
        return reg
    return ad.add(ad.mean(per_traj), reg)


def simulator_factory(truth: StateSpaceModel, x0, x0_std: float = 0.0) -> Callable[[list], BatchSimulator]:
    """Factory of fresh batch simulators for a list of seeds."""
    def make(seeds):
        return BatchSimulator(truth, x0, seeds, x0_std)
    return make


def loss_and_grad(controller: Controller, theta: np.ndarray, sim: BatchSimulator, cost: QuadraticCost,
                  gamma: float) -> tuple[float, np.ndarray]:
    tape = ad.Tape()
    leaf = tape.leaf(theta)
    traj = rollout(controller, sim, cost, theta=leaf)
    loss = regularized_loss(traj, leaf, gamma, cost)
    grad = ad.backward(loss, [leaf])[leaf.index]
    return float(loss.value), grad


def train(design: StateSpaceModel, make_sim: Callable[[list], BatchSimulator], cost: QuadraticCost,
          cfg: TrainConfig, x0, params: GainNetParams | None = None, checkpoint_dir=None) -> TrainReport:
    """Gradient training of the gain network against simulator rollouts.

    Iteration ``i`` draws ``cfg.batch_size`` fresh seeds from stream
    ``i + 1`` of ``cfg.seed``, so runs are reproducible.
    """
    if params is None:
        params = init_params(design.m, design.n, cfg.arch, seed=cfg.seed)
    controller = Controller.learned(design, cost, params, x0)
    theta = params.theta.copy()
    opt = make_optimizer(cfg)
    report = TrainReport(params)
    start = time.perf_counter()
    for i in range(cfg.iterations):
        sim = make_sim(trajectory_seeds(cfg.seed, cfg.batch_size, stream=i + 1))
        with np.errstate(over="ignore", invalid="ignore"):
            loss, grad = loss_and_grad(controller, theta, sim, cost, cfg.regularization)
        gnorm = float(np.linalg.norm(grad))
        if not (np.isfinite(loss) and np.isfinite(gnorm)):
            raise TrainingAborted(f"non-finite loss ({loss}) or gradient norm ({gnorm})", i)
        if cfg.clip_norm is not None and gnorm > cfg.clip_norm:
            grad = grad * (cfg.clip_norm / gnorm)
        theta = opt.step(theta, grad)
        report.losses.append(loss)
        report.grad_norms.append(gnorm)
        if cfg.checkpoint_every and checkpoint_dir is not None and (i + 1) % cfg.checkpoint_every == 0:
            params.with_theta(theta).save(Path(checkpoint_dir) / f"checkpoint_{i + 1:06d}.json")
        if i % 50 == 0:
            log.debug("iteration %d loss %.4g dB grad %.3g", i, to_db(loss), gnorm)
    report.params = params.with_theta(theta)
    report.wall_time = time.perf_counter() - start
    return report


def directional_check(f: Callable[[np.ndarray], float], grad: np.ndarray, theta: np.ndarray,
                      directions: int = 5, eps: float = 1e-6, seed: int = 0) -> float:
    """Max relative error between ∇f·d and central differences of f along random unit d."""
    rng = np.random.Generator(np.random.Philox(seed))
    worst = 0.0
    for _ in range(directions):
        d = rng.standard_normal(theta.shape)
        d /= np.linalg.norm(d)
        analytic = float(np.sum(grad * d))
        numeric = (f(theta + eps * d) - f(theta - eps * d)) / (2 * eps)
        scale = max(abs(analytic), abs(numeric), 1e-300)
        worst = max(worst, abs(analytic - numeric) / scale)
    return worst


def grad_check(design: StateSpaceModel, cost: QuadraticCost, params: GainNetParams, truth: StateSpaceModel | None = None,
               x0=None, directions: int = 5, eps: float = 1e-6, seed: int = 0, batch_size: int = 2,
               gamma: float = 0.0, x0_std: float = 0.0) -> float:
    """Tape gradient of the closed-loop loss vs central differences, fixed seeds."""
    truth = design if truth is None else truth
    x0 = np.zeros(design.m) if x0 is None else x0
    controller = Controller.learned(design, cost, params, x0)
    seeds = trajectory_seeds(seed, batch_size)

    def f(theta):
        sim = BatchSimulator(truth, x0, seeds, x0_std)
        traj = rollout(controller, sim, cost, theta=theta)
        return float(regularized_loss(traj, theta, gamma, cost))

    _, grad = loss_and_grad(controller, params.theta, BatchSimulator(truth, x0, seeds, x0_std), cost, gamma)
    return directional_check(f, grad, params.theta, directions, eps, seed)
