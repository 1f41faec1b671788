"""Model-based Kalman filter over a (possibly mismatched) design model."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import DimensionError, SingularityError, solve_spd
from .dynamics import StateSpaceModel

DEFAULT_PRIOR_VARIANCE = 1e-6


@dataclass(frozen=True)
class Belief:
    mean: np.ndarray
    cov: np.ndarray


@dataclass(frozen=True)
class UpdateReport:
    innovation: np.ndarray
    innovation_cov: np.ndarray
    gain: np.ndarray


def initial_belief(x0, variance: float = DEFAULT_PRIOR_VARIANCE) -> Belief:
    x0 = np.asarray(x0, dtype=np.float64).reshape(-1)
    return Belief(x0, variance * np.eye(x0.size))


def _sym(a):
    return 0.5 * (a + a.T)


def kf_predict(model: StateSpaceModel, prev: Belief, u) -> tuple[Belief, np.ndarray]:
    """Time update. Returns the predicted belief and predicted observation."""
    u = np.asarray(u, dtype=np.float64).reshape(-1)
    if prev.mean.shape != (model.m,) or u.shape != (model.q,):
        raise DimensionError(
            f"predict: mean {prev.mean.shape} / control {u.shape} do not fit model (m={model.m}, q={model.q})")
    mean = model.F @ prev.mean + model.G @ u
    cov = _sym(model.F @ prev.cov @ model.F.T + model.W)
    return Belief(mean, cov), model.H @ mean


def predicted_cov(model: StateSpaceModel, cov: np.ndarray) -> np.ndarray:
    return _sym(model.F @ cov @ model.F.T + model.W)


def kalman_gain(model: StateSpaceModel, prior_cov: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(K, S, posterior covariance) from a predicted covariance."""
    S = _sym(model.H @ prior_cov @ model.H.T + model.V)
    try:
        # K = Σ Hᵀ S⁻¹  <=>  S Kᵀ = H Σ
        K = solve_spd(S, model.H @ prior_cov).T
    except SingularityError as exc:
        raise SingularityError(f"innovation covariance is singular ({exc})", exc.pivot) from None
    post = _sym(prior_cov - K @ S @ K.T)
    return K, S, post


def kf_update(model: StateSpaceModel, predicted: Belief, y_pred, y) -> tuple[Belief, UpdateReport]:
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if y.shape != (model.n,):
        raise DimensionError(f"observation has {y.size} entries, expected {model.n}")
    K, S, post = kalman_gain(model, predicted.cov)
    innovation = y - np.asarray(y_pred, dtype=np.float64)
    mean = predicted.mean + K @ innovation
    return Belief(mean, post), UpdateReport(innovation, S, K)


def filter_trajectory(model: StateSpaceModel, belief0: Belief, controls, observations):
    """Run predict/update over a horizon.

    ``controls[t]`` is u_t (applied before y_{t+1}); ``observations[t]`` is
    y_{t+1}. Returns (beliefs, reports) with ``len(beliefs) == T + 1``.
    """
    controls = np.asarray(controls, dtype=np.float64).reshape(-1, model.q)
    observations = np.asarray(observations, dtype=np.float64).reshape(-1, model.n)
    if len(controls) != len(observations):
        raise DimensionError(f"{len(controls)} controls but {len(observations)} observations")
    beliefs, reports = [belief0], []
    for u, y in zip(controls, observations):
        predicted, y_pred = kf_predict(model, beliefs[-1], u)
        post, report = kf_update(model, predicted, y_pred, y)
        beliefs.append(post)
        reports.append(report)
    return beliefs, reports


def gain_schedule(model: StateSpaceModel, cov0: np.ndarray, horizon: int):
    """Data-independent KF gains K_1..K_T and posterior covariances Σ_0..Σ_T."""
    covs, gains = [np.asarray(cov0, dtype=np.float64)], []
    for _ in range(horizon):
        K, _, post = kalman_gain(model, predicted_cov(model, covs[-1]))
        gains.append(K)
        covs.append(post)
    return gains, covs


def is_psd(a: np.ndarray, tol: float = 1e-10) -> bool:
    return bool(np.min(np.linalg.eigvalsh(_sym(a))) >= -tol)

