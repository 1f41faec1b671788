import csv

import numpy as np
import pytest

from lqgkit.closed_loop import (
    Controller,
    Trajectory,
    Variant,
    evaluate,
    lqg_loss,
    rollout,
    state_mse,
    to_db,
    write_trajectory_csv,
)
from lqgkit.dynamics import BatchSimulator, design_model, trajectory_seeds
from lqgkit.estimation import gain_schedule
from lqgkit.gainnet import init_params, param_count
from lqgkit.regulation import QuadraticCost

X0 = np.array([10.0, 0.0])


def noiseless_truth():
    return design_model().with_noise(np.zeros((2, 2)), np.zeros((2, 2)))


def analytic_lqg_cost(model, cost, controller):
    """Expected loss of a certainty-equivalent controller with matched KF.

    J = x0ᵀ P_0 x0 + Σ_t tr(P_{t+1} W) + Σ_t tr(Σ_t L_tᵀ (R + Gᵀ P_{t+1} G) L_t),
    Σ_t the estimation-error covariance at control time (zero at t = 0 since x0
    is known exactly).
    """
    sched = controller.schedule
    _, covs = gain_schedule(model, controller.prior_cov, cost.horizon)
    covs = [np.zeros((2, 2))] + covs[1:]
    G = model.G
    J = X0 @ sched.riccati[0] @ X0
    for t in range(cost.horizon):
        P1, L = sched.riccati[t + 1], sched.gains[t]
        J += np.trace(P1 @ model.W)
        J += np.trace(covs[t] @ L.T @ (cost.R_control + G.T @ P1 @ G) @ L)
    return J


def test_zero_horizon_trajectory():
    cost = QuadraticCost.identity(2, 1, 0)
    ctrl = Controller.model_based(design_model(0.0), cost, X0)
    traj = rollout(ctrl, BatchSimulator(design_model(0.0), X0, trajectory_seeds(0, 2)), cost)
    assert traj.states.shape == (2, 1, 2) and traj.controls.shape == (2, 0, 1)
    assert np.allclose(lqg_loss(traj, cost), [100.0, 100.0])


def test_trajectory_shapes():
    cost = QuadraticCost.identity(2, 1, 7)
    ctrl = Controller.model_based(design_model(0.0), cost, X0)
    traj = rollout(ctrl, BatchSimulator(design_model(0.0), X0, trajectory_seeds(0, 3)), cost)
    assert traj.states.shape == (3, 8, 2)
    assert traj.observations.shape == (3, 7, 2)
    assert traj.controls.shape == (3, 7, 1)
    assert traj.estimates.shape == (3, 7, 2)
    assert traj.gains.shape == (3, 7, 2, 2)
    assert np.array_equal(traj.states[:, 0], np.tile(X0, (3, 1)))


def test_noiseless_zero_weight_network_matches_model_based():
    cost = QuadraticCost.identity(2, 1, 30)
    design = design_model(0.0)
    truth = noiseless_truth()
    mb = Controller.model_based(design, cost, X0)
    zero = init_params(2, 2).with_theta(np.zeros(param_count(2, 2)))
    learned = Controller.learned(design, cost, zero, X0)
    a = rollout(mb, BatchSimulator(truth, X0, [1]), cost)
    b = rollout(learned, BatchSimulator(truth, X0, [1]), cost)
    assert np.array_equal(b.gains, np.zeros_like(b.gains))
    assert np.allclose(a.controls, b.controls, atol=1e-12)
    assert np.allclose(a.states, b.states, atol=1e-12)


def test_noiseless_innovation_vanishes():
    cost = QuadraticCost.identity(2, 1, 20)
    traj = rollout(Controller.learned(design_model(0.0), cost, init_params(2, 2), X0),
                   BatchSimulator(noiseless_truth(), X0, [0]), cost)
    assert np.allclose(traj.observations, traj.estimates, atol=1e-10)


def test_matched_model_based_matches_analytic_cost():
    model = design_model(0.0)
    cost = QuadraticCost.identity(2, 1, 100)
    ctrl = Controller.model_based(model, cost, X0)
    losses, _ = evaluate(ctrl, model, cost, trajectory_seeds(2024, 1000))
    expected = analytic_lqg_cost(model, cost, ctrl)
    assert abs(losses.mean() / expected - 1.0) < 0.03


def test_matched_state_mse_matches_filter_covariance():
    model = design_model(0.0)
    cost = QuadraticCost.identity(2, 1, 100)
    ctrl = Controller.model_based(model, cost, X0)
    _, mse = evaluate(ctrl, model, cost, trajectory_seeds(7, 500))
    _, covs = gain_schedule(model, ctrl.prior_cov, 100)
    bound = np.mean([np.trace(c) for c in covs[1:]])
    assert abs(mse.mean() / bound - 1.0) < 0.05


def test_closed_loop_stays_bounded():
    model = design_model(0.0)
    cost = QuadraticCost.identity(2, 1, 100)
    sims = BatchSimulator(model, X0, trajectory_seeds(3, 1000))
    traj = rollout(Controller.model_based(model, cost, X0), sims, cost)
    assert np.max(np.linalg.norm(traj.states, axis=-1)) < 30.0


def test_forced_kalman_gains_reproduce_model_based_bitwise():
    model = design_model(0.0)
    cost = QuadraticCost.identity(2, 1, 40)
    mb = Controller.model_based(model, cost, X0)
    learned = Controller.learned(model, cost, init_params(2, 2, seed=1), X0)
    gains, _ = gain_schedule(model, mb.prior_cov, 40)
    a = rollout(mb, BatchSimulator(model, X0, trajectory_seeds(5, 4)), cost)
    b = rollout(learned, BatchSimulator(model, X0, trajectory_seeds(5, 4)), cost, forced_gains=gains)
    for field in ("states", "observations", "controls", "estimates", "gains"):
        assert np.array_equal(getattr(a, field), getattr(b, field)), field


# ---------------------------------------------------------------- loss / metrics

def _traj(states, controls, estimates=None):
    states = np.asarray(states, dtype=float)[None]
    controls = np.asarray(controls, dtype=float)[None]
    T = controls.shape[1]
    est = np.zeros((1, T, states.shape[-1])) if estimates is None else np.asarray(estimates, dtype=float)[None]
    return Trajectory(states, np.zeros((1, T, 2)), controls, est, np.zeros((1, T, 2, 2)), np.zeros((1, 2)))


def test_loss_of_zero_trajectory():
    cost = QuadraticCost.identity(2, 1, 3)
    assert lqg_loss(_traj(np.zeros((4, 2)), np.zeros((3, 1))), cost)[0] == 0.0


def test_loss_hand_evaluation():
    cost = QuadraticCost.identity(2, 1, 1)
    assert lqg_loss(_traj([[1.0, 0.0], [0.0, 0.0]], [[2.0]]), cost)[0] == 5.0


def test_loss_uses_distinct_weights():
    cost = QuadraticCost(2 * np.eye(2), 3 * np.eye(2), [[5.0]], 1)
    # 2*1 + 5*4 + 3*(1 + 4)
    assert lqg_loss(_traj([[1.0, 0.0], [1.0, 2.0]], [[2.0]]), cost)[0] == 37.0


def test_loss_homogeneous_and_nonnegative():
    rng = np.random.default_rng(0)
    cost = QuadraticCost(np.diag([1.0, 0.5]), np.eye(2), [[0.2]], 5)
    tr = _traj(rng.standard_normal((6, 2)), rng.standard_normal((5, 1)))
    base = lqg_loss(tr, cost)[0]
    assert base >= 0.0
    assert lqg_loss(tr, cost.scaled(3.5))[0] == pytest.approx(3.5 * base, rel=1e-14)


def test_loss_targets_shift_deviation():
    cost = QuadraticCost(np.eye(2), np.eye(2), [[1.0]], 1, state_target=[1.0, 0.0], control_target=[2.0])
    assert lqg_loss(_traj([[1.0, 0.0], [1.0, 0.0]], [[2.0]]), cost)[0] == 0.0


def test_state_mse_perfect_estimates():
    states = np.array([[0.0, 0.0], [1.0, 2.0], [3.0, 4.0]])
    assert state_mse(_traj(states, np.zeros((2, 1)), states[1:]))[0] == 0.0


def test_state_mse_single_step():
    assert state_mse(_traj([[0.0, 0.0], [1.0, 0.0]], np.zeros((1, 1)), [[0.0, 0.0]]))[0] == 1.0


def test_to_db():
    assert to_db(1.0) == 0.0
    assert to_db(10.0) == 10.0
    assert to_db(0.5) == pytest.approx(-3.0103, abs=1e-4)
    with pytest.raises(ValueError):
        to_db(0.0)
    with pytest.raises(ValueError):
        to_db(-1.0)


# ---------------------------------------------------------------- export

def test_trajectory_csv_schema(tmp_path):
    cost = QuadraticCost.identity(2, 1, 12)
    model = design_model(0.0)
    traj = rollout(Controller.model_based(model, cost, X0), BatchSimulator(model, X0, [4]), cost)
    path = tmp_path / "trajectory.csv"
    write_trajectory_csv(traj, path)
    rows = list(csv.reader(path.open()))
    assert rows[0] == ["t", "x_1", "x_2", "y_1", "y_2", "u_1", "xhat_1", "xhat_2"]
    assert len(rows) == 1 + 13
    assert rows[1][:3] == ["0", "10.0", "0.0"] and rows[1][3] == ""
    assert rows[-1][5] == ""
    assert float(rows[5][1]) == traj.states[0, 4, 0]


def test_variant_names():
    assert Variant("learned") is Variant.LEARNED
