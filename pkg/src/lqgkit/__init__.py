"""Linear-quadratic-Gaussian control with a learned Kalman gain.

Modules, bottom up: ``autodiff`` (reverse-mode tape over numpy),
``dynamics`` (state-space models and simulators), ``estimation`` (Kalman
filter), ``regulation`` (finite-horizon LQR), ``gainnet`` (recurrent gain
network), ``closed_loop`` (controllers, rollouts, metrics), ``training``
and ``bench`` (experiment harness, also behind ``python -m lqgkit``).
"""
from .closed_loop import Controller, Trajectory, evaluate, lqg_loss, rollout, state_mse, to_db
from .dynamics import BatchSimulator, MismatchSpec, StateSpaceModel, apply_mismatch, design_model
from .gainnet import GainNetParams, init_params
from .regulation import QuadraticCost, riccati_backward
from .training import TrainConfig, train

__all__ = [
    "BatchSimulator", "Controller", "GainNetParams", "MismatchSpec", "QuadraticCost", "StateSpaceModel",
    "TrainConfig", "Trajectory", "apply_mismatch", "design_model", "evaluate", "init_params", "lqg_loss",
    "riccati_backward", "rollout", "state_mse", "to_db", "train",
]
