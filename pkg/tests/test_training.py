import csv

import numpy as np
import pytest

from lqgkit import autodiff as ad
from lqgkit.closed_loop import Trajectory
from lqgkit.dynamics import StateSpaceModel, design_model
from lqgkit.gainnet import ArchConfig, init_params
from lqgkit.regulation import QuadraticCost
from lqgkit.training import (
    TrainConfig,
    TrainingAborted,
    directional_check,
    grad_check,
    regularized_loss,
    simulator_factory,
    train,
)

X0 = np.array([10.0, 0.0])
SMALL = ArchConfig(8, 8)


def fixed_traj(losses):
    """Trajectories whose control loss equals the given values (T = 0)."""
    states = np.sqrt(np.asarray(losses, dtype=float))[:, None, None] * np.array([1.0, 0.0])
    B = len(losses)
    return Trajectory(states, np.zeros((B, 0, 2)), np.zeros((B, 0, 1)), np.zeros((B, 0, 2)),
                      np.zeros((B, 0, 2, 2)), np.zeros((B, 2)))


def test_regularized_loss_without_penalty_is_mean():
    cost = QuadraticCost.identity(2, 1, 0)
    tape = ad.Tape()
    theta = tape.leaf(np.ones(3))
    assert float(regularized_loss(fixed_traj([3.0, 5.0]), theta, 0.0, cost).value) == pytest.approx(4.0)


def test_regularizer_only():
    cost = QuadraticCost.identity(2, 1, 0)
    tape = ad.Tape()
    theta = tape.leaf([2.0, 0.0])
    assert float(regularized_loss(fixed_traj([0.0]), theta, 0.5, cost).value) == 2.0


def test_zero_iterations_leave_params():
    params = init_params(2, 2, SMALL, seed=3)
    cost = QuadraticCost.identity(2, 1, 5)
    report = train(design_model(0.0), simulator_factory(design_model(0.0), X0), cost,
                   TrainConfig(iterations=0, arch=SMALL), X0, params)
    assert np.array_equal(report.params.theta, params.theta)
    assert report.losses == []


def test_quadratic_toy_gradient_check():
    rng = np.random.default_rng(0)
    a = rng.standard_normal((6, 6))
    A = a @ a.T
    b = rng.standard_normal(6)
    x = rng.standard_normal(6)
    f = lambda v: float(v @ A @ v + b @ v)
    # central differences are exact for quadratics, so a wide step only trims round-off
    assert directional_check(f, 2 * A @ x + b, x, directions=10, eps=1e-3) < 1e-9


def test_closed_loop_gradient_check():
    cost = QuadraticCost.identity(2, 1, 20)
    err = grad_check(design_model(0.0), cost, init_params(2, 2, seed=0), x0=X0, directions=5, eps=1e-6, seed=3)
    assert err < 1e-4


def test_closed_loop_gradient_check_with_regularizer_and_mismatch():
    from lqgkit.dynamics import MismatchSpec, apply_mismatch
    design = design_model(-5.0)
    truth = apply_mismatch(design, MismatchSpec("observation", 20.0))
    cost = QuadraticCost(np.eye(2), 2 * np.eye(2), [[0.5]], 15, state_target=[1.0, 0.0])
    err = grad_check(design, cost, init_params(2, 2, SMALL, seed=1), truth=truth, x0=X0, gamma=0.1, x0_std=1.0)
    assert err < 1e-4


def test_large_step_finite_differences_degrade():
    # negative control: truncation error dominates at eps = 0.1
    cost = QuadraticCost.identity(2, 1, 20)
    params = init_params(2, 2, seed=0)
    small = grad_check(design_model(0.0), cost, params, x0=X0, eps=1e-6, seed=3)
    large = grad_check(design_model(0.0), cost, params, x0=X0, eps=1e-1, seed=3)
    assert large > 100 * small


def test_training_is_deterministic():
    cost = QuadraticCost.identity(2, 1, 10)
    cfg = TrainConfig(iterations=4, batch_size=4, arch=SMALL, seed=5)
    make = simulator_factory(design_model(0.0), X0, 1.0)
    a = train(design_model(0.0), make, cost, cfg, X0)
    b = train(design_model(0.0), make, cost, cfg, X0)
    assert np.array_equal(a.params.theta, b.params.theta)
    assert a.losses == b.losses


def test_training_loss_trends_down():
    cost = QuadraticCost.identity(2, 1, 100)
    cfg = TrainConfig(iterations=80, seed=0)
    design = design_model(0.0)
    report = train(design, simulator_factory(design, X0, cfg.x0_std), cost, cfg, X0)
    curve = np.array(report.losses_db)
    assert len(curve) == 80
    assert np.mean(curve[-20:]) < np.mean(curve[:20])


def test_regularization_contracts_geometrically():
    cost = QuadraticCost.identity(2, 1, 0)
    mu, gamma = 0.01, 2.0
    params = init_params(2, 2, SMALL, seed=0)
    cfg = TrainConfig(learning_rate=mu, iterations=5, optimizer="sgd", regularization=gamma, clip_norm=None, arch=SMALL)
    design = design_model(0.0)
    report = train(design, simulator_factory(design, X0), cost, cfg, X0, params)
    ratio = np.linalg.norm(report.params.theta) / np.linalg.norm(params.theta)
    assert ratio == pytest.approx((1 - 2 * mu * gamma) ** 5, rel=1e-12)


def test_non_finite_loss_aborts_with_iteration():
    unstable = StateSpaceModel(1e30 * np.eye(2), [[0.0], [1.0]], np.eye(2), np.eye(2), np.eye(2))
    cost = QuadraticCost.identity(2, 1, 30)
    with pytest.raises(TrainingAborted) as info:
        train(design_model(0.0), simulator_factory(unstable, X0), cost, TrainConfig(iterations=3, arch=SMALL), X0)
    assert info.value.iteration == 0


def test_checkpoints_and_curve(tmp_path):
    cost = QuadraticCost.identity(2, 1, 5)
    cfg = TrainConfig(iterations=4, batch_size=2, checkpoint_every=2, arch=SMALL)
    design = design_model(0.0)
    report = train(design, simulator_factory(design, X0), cost, cfg, X0, checkpoint_dir=tmp_path)
    assert sorted(p.name for p in tmp_path.glob("checkpoint_*.json")) == [
        "checkpoint_000002.json", "checkpoint_000004.json"]
    report.write_curve(tmp_path / "train_curve.csv")
    rows = list(csv.reader((tmp_path / "train_curve.csv").open()))
    assert rows[0] == ["iteration", "loss", "loss_db", "grad_norm"]
    assert len(rows) == 5
    assert float(rows[1][2]) == pytest.approx(10 * np.log10(float(rows[1][1])))


@pytest.mark.parametrize("kwargs", [
    {"learning_rate": 0.0}, {"iterations": -1}, {"batch_size": 0}, {"regularization": -1.0},
    {"optimizer": "rmsprop"}, {"clip_norm": 0.0},
])
def test_config_validation(kwargs):
    with pytest.raises(ValueError):
        TrainConfig(**kwargs)
