"""Separation controller (estimator + LQR) in closed loop with a simulator.

Per-step order: control from the current estimate, advance the truth,
observe, predict with the design model, correct with the step's gain. The
model-based and learned variants share this loop and differ only in where
the gain comes from.
"""
from __future__ import annotations

import csv
import enum
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .dynamics import BatchSimulator, StateSpaceModel
from .estimation import DEFAULT_PRIOR_VARIANCE, gain_schedule
from .gainnet import GainNetParams, GainNetState, build_features, gain_step
from .regulation import GainSchedule, QuadraticCost, lqr_control, riccati_backward


class Variant(str, enum.Enum):
    MODEL_BASED = "model-based"
    LEARNED = "learned"


@dataclass(frozen=True, eq=False)
class Controller:
    variant: Variant
    design: StateSpaceModel
    schedule: GainSchedule
    prior_mean: np.ndarray
    prior_cov: np.ndarray
    params: GainNetParams | None = None

    @classmethod
    def model_based(cls, design: StateSpaceModel, cost: QuadraticCost, x0,
                    prior_variance: float = DEFAULT_PRIOR_VARIANCE) -> "Controller":
        x0 = np.asarray(x0, dtype=np.float64).reshape(design.m)
        return cls(Variant.MODEL_BASED, design, riccati_backward(design, cost), x0,
                   prior_variance * np.eye(design.m))

    @classmethod
    def learned(cls, design: StateSpaceModel, cost: QuadraticCost, params: GainNetParams, x0) -> "Controller":
        if (params.m, params.n) != (design.m, design.n):
            raise ad.DimensionError(f"network is for m={params.m}, n={params.n}; model has m={design.m}, n={design.n}")
        x0 = np.asarray(x0, dtype=np.float64).reshape(design.m)
        return cls(Variant.LEARNED, design, riccati_backward(design, cost), x0,
                   DEFAULT_PRIOR_VARIANCE * np.eye(design.m), params)

    def with_params(self, params: GainNetParams) -> "Controller":
        return Controller(self.variant, self.design, self.schedule, self.prior_mean, self.prior_cov, params)


@dataclass(frozen=True)
class Trajectory:
    """Row-batched record of a rollout (values may be taped).

    states (B, T+1, m) x_0..x_T; observations (B, T, n) y_1..y_T;
    controls (B, T, q) u_0..u_{T-1}; estimates (B, T, m) x̂_1..x̂_T;
    gains (B, T, m, n) K_1..K_T; initial_estimate (B, m) x̂_0.
    """

    states: object
    observations: object
    controls: object
    estimates: object
    gains: object
    initial_estimate: np.ndarray

    @property
    def horizon(self) -> int:
        return ad.value_of(self.controls).shape[1]

    @property
    def batch(self) -> int:
        return ad.value_of(self.states).shape[0]

    def values(self) -> "Trajectory":
        """Copy with tape nodes replaced by their values."""
        return Trajectory(*(ad.value_of(getattr(self, k)) for k in
                            ("states", "observations", "controls", "estimates", "gains")),
                          self.initial_estimate)


def _apply_gain(K, innovation):
    """x̂ correction K Δy for batched gains (B, m, n) and rows (B, n)."""
    batch, n = ad.value_of(innovation).shape
    m = ad.value_of(K).shape[-2]
    corr = ad.matmul(K, ad.reshape(innovation, (batch, n, 1)))
    return ad.reshape(corr, (batch, m))


def _stack_or_empty(items, shape):
    return ad.stack(items, axis=1) if items else np.zeros(shape)


def rollout(controller: Controller, sim: BatchSimulator, cost: QuadraticCost, theta=None,
            forced_gains=None) -> Trajectory:
    """Run the closed loop for ``cost.horizon`` steps.

    ``theta`` overrides the learned variant's flat weights (pass a taped
    leaf to differentiate). ``forced_gains`` (list of m x n) replaces the
    network output after it is computed.
    """
    design = controller.design
    m, n, q = design.m, design.n, design.q
    T, B = cost.horizon, len(sim)
    if sim.truth.m != m or sim.truth.n != n or sim.truth.q != q:
        raise ad.DimensionError("simulator and controller dimensions differ")
    if len(controller.schedule) < T:
        raise ValueError(f"gain schedule covers {len(controller.schedule)} steps, horizon is {T}")

    x_hat = np.tile(controller.prior_mean, (B, 1))
    initial = x_hat.copy()
    states, observations, controls, estimates, gains = [sim.x0], [], [], [], []

    learned = controller.variant is Variant.LEARNED
    if learned:
        params = controller.params
        weights = params.unflatten(params.theta if theta is None else theta)
        net_state = GainNetState.zeros(B, m, n, params.arch.hidden_size)
    else:
        kf_gains, _ = gain_schedule(design, controller.prior_cov, T)

    for t in range(T):
        u = lqr_control(controller.schedule.gains[t], x_hat, cost)
        x, y = sim.step(u)
        prior = ad.add(ad.matmul(x_hat, design.F.T), ad.matmul(u, design.G.T))
        y_pred = ad.matmul(prior, design.H.T)
        innovation = ad.sub(y, y_pred)
        if learned:
            features, net_state = build_features(y, net_state, y_pred)
            K, net_state = gain_step(weights, net_state, features, m, n)
        else:
            K = kf_gains[t]
        if forced_gains is not None:
            K = forced_gains[t]
        if ad.value_of(K).ndim == 2:
            K = np.broadcast_to(K, (B, m, n))
        x_hat = ad.add(prior, _apply_gain(K, innovation))
        if learned:
            net_state = net_state.observed(x_hat, prior, y)
        states.append(x)
        observations.append(y)
        controls.append(u)
        estimates.append(x_hat)
        gains.append(K)

    return Trajectory(
        states=ad.stack(states, axis=1),
        observations=_stack_or_empty(observations, (B, 0, n)),
        controls=_stack_or_empty(controls, (B, 0, q)),
        estimates=_stack_or_empty(estimates, (B, 0, m)),
        gains=_stack_or_empty(gains, (B, 0, m, n)),
        initial_estimate=initial,
    )


def _quadratic(dev, weight):
    """Σ over the last two axes of (dev W) ⊙ dev, per batch row."""
    return ad.sum(ad.sum(ad.mul(ad.matmul(dev, weight), dev), axis=-1), axis=-1)


def lqg_loss(traj: Trajectory, cost: QuadraticCost):
    """Finite-horizon quadratic loss per trajectory, shape (B,).

    x̃_Tᵀ Q_T x̃_T + Σ_{t=0}^{T-1} (x̃_tᵀ Q x̃_t + ũ_tᵀ R ũ_t)
    """
    T = traj.horizon
    states = ad.sub(traj.states, cost.state_target)
    running = ad.getitem(states, (slice(None), slice(0, T))) if T else None
    final = ad.getitem(states, (slice(None), slice(T, T + 1)))
    loss = _quadratic(final, cost.Q_final)
    if T:
        loss = ad.add(loss, _quadratic(running, cost.Q_state))
        loss = ad.add(loss, _quadratic(ad.sub(traj.controls, cost.control_target), cost.R_control))
    return loss


def state_mse(traj: Trajectory) -> np.ndarray:
    """(1/T) Σ_{t=1}^{T} ‖x_t − x̂_t‖² per trajectory, shape (B,)."""
    states = ad.value_of(traj.states)[:, 1:]
    err = states - ad.value_of(traj.estimates)
    if err.shape[1] == 0:
        raise ValueError("state MSE needs at least one estimate")
    return np.mean(np.sum(err ** 2, axis=-1), axis=-1)


def to_db(value):
    """10 log10(value) for positive values."""
    arr = np.asarray(value, dtype=np.float64)
    if np.any(~(arr > 0.0)):
        raise ValueError(f"dB conversion needs positive values, got {value!r}")
    out = 10.0 * np.log10(arr)
    return float(out) if out.ndim == 0 else out


def evaluate(controller: Controller, truth: StateSpaceModel, cost: QuadraticCost, seeds,
             x0_std: float = 0.0, batch_size: int = 250) -> tuple[np.ndarray, np.ndarray]:
    """Per-seed LQG losses and state MSEs over fresh simulators."""
    seeds = list(seeds)
    losses, mses = [], []
    for start in range(0, len(seeds), batch_size):
        sim = BatchSimulator(truth, controller.prior_mean, seeds[start:start + batch_size], x0_std)
        traj = rollout(controller, sim, cost)
        losses.append(lqg_loss(traj, cost))
        mses.append(state_mse(traj))
    if not losses:
        return np.zeros(0), np.zeros(0)
    return np.concatenate(losses), np.concatenate(mses)


def plain(value) -> str:
    """Shortest round-trip decimal without exponent, independent of locale."""
    return np.format_float_positional(float(value), trim="0")


def write_trajectory_csv(traj: Trajectory, path, index: int = 0) -> None:
    """One row per t = 0..T; columns absent at a step are left empty."""
    traj = traj.values()
    states, obs, ctrl, est = traj.states[index], traj.observations[index], traj.controls[index], traj.estimates[index]
    T, m = traj.horizon, states.shape[-1]
    n, q = obs.shape[-1], ctrl.shape[-1]
    header = (["t"] + [f"x_{i + 1}" for i in range(m)] + [f"y_{i + 1}" for i in range(n)]
              + [f"u_{i + 1}" for i in range(q)] + [f"xhat_{i + 1}" for i in range(m)])
    with open(Path(path), "w", newline="", encoding="ascii") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for t in range(T + 1):
            y = [plain(v) for v in obs[t - 1]] if t > 0 else [""] * n
            u = [plain(v) for v in ctrl[t]] if t < T else [""] * q
            xh = est[t - 1] if t > 0 else traj.initial_estimate[index]
            writer.writerow([t] + [plain(v) for v in states[t]] + y + u + [plain(v) for v in xh])
