"""Finite-horizon LQR: backward Riccati recursion and the feedback law."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import DimensionError, SingularityError, solve_spd
from .dynamics import StateSpaceModel


@dataclass(frozen=True, eq=False)
class QuadraticCost:
    """Weights of the finite-horizon quadratic loss around target values."""

    Q_state: np.ndarray
    Q_final: np.ndarray
    R_control: np.ndarray
    horizon: int
    state_target: np.ndarray = field(default=None)
    control_target: np.ndarray = field(default=None)

    def __post_init__(self):
        Q = np.atleast_2d(np.asarray(self.Q_state, dtype=np.float64))
        QT = np.atleast_2d(np.asarray(self.Q_final, dtype=np.float64))
        R = np.atleast_2d(np.asarray(self.R_control, dtype=np.float64))
        m, q = Q.shape[0], R.shape[0]
        if Q.shape != (m, m) or QT.shape != (m, m) or R.shape != (q, q):
            raise DimensionError(f"cost weights have shapes {Q.shape}, {QT.shape}, {R.shape}")
        if int(self.horizon) < 0:
            raise ValueError(f"horizon must be non-negative, got {self.horizon}")
        for name, mat in (("Q_state", Q), ("Q_final", QT)):
            if np.min(np.linalg.eigvalsh(0.5 * (mat + mat.T))) < -1e-12:
                raise ValueError(f"{name} must be positive semi-definite")
        if q and np.min(np.linalg.eigvalsh(0.5 * (R + R.T))) <= 0.0:
            raise ValueError("R_control must be positive definite")
        xs = np.zeros(m) if self.state_target is None else np.asarray(self.state_target, dtype=np.float64).reshape(m)
        us = np.zeros(q) if self.control_target is None else np.asarray(self.control_target, dtype=np.float64).reshape(q)
        object.__setattr__(self, "Q_state", Q)
        object.__setattr__(self, "Q_final", QT)
        object.__setattr__(self, "R_control", R)
        object.__setattr__(self, "horizon", int(self.horizon))
        object.__setattr__(self, "state_target", xs)
        object.__setattr__(self, "control_target", us)

    @classmethod
    def identity(cls, m: int, q: int, horizon: int, control_weight: float = 1.0) -> "QuadraticCost":
        return cls(np.eye(m), np.eye(m), control_weight * np.eye(q), horizon)

    def scaled(self, c: float) -> "QuadraticCost":
        return QuadraticCost(c * self.Q_state, c * self.Q_final, c * self.R_control, self.horizon,
                             self.state_target, self.control_target)


@dataclass(frozen=True)
class GainSchedule:
    gains: list  # L_0 .. L_{T-1}, each q x m
    riccati: list  # P_0 .. P_T, each m x m

    def __len__(self):
        return len(self.gains)


def riccati_backward(design: StateSpaceModel, cost: QuadraticCost) -> GainSchedule:
    """Backward recursion from P_T = Q_T.

    L_t = (R + Gᵀ P_{t+1} G)⁻¹ Gᵀ P_{t+1} F
    P_t = Q + Fᵀ P_{t+1} F − Fᵀ P_{t+1} G L_t
    """
    F, G = design.F, design.G
    if cost.Q_state.shape[0] != design.m or cost.R_control.shape[0] != design.q:
        raise DimensionError(
            f"cost is for m={cost.Q_state.shape[0]}, q={cost.R_control.shape[0]}; model has m={design.m}, q={design.q}")
    P = cost.Q_final.copy()
    riccati, gains = [P], []
    for _ in range(cost.horizon):
        bracket = cost.R_control + G.T @ P @ G
        try:
            L = solve_spd(bracket, G.T @ P @ F)
        except SingularityError as exc:
            raise SingularityError(f"R + GᵀPG is not positive definite ({exc})", exc.pivot) from None
        with np.errstate(over="ignore", invalid="ignore"):
            P = cost.Q_state + F.T @ P @ F - F.T @ P @ G @ L
        if not np.all(np.isfinite(P)):
            raise FloatingPointError(f"Riccati recursion overflowed {len(gains) + 1} steps before the horizon end")
        P = 0.5 * (P + P.T)
        gains.append(L)
        riccati.append(P)
    return GainSchedule(gains[::-1], riccati[::-1])


def lqr_control(L, x_hat, cost: QuadraticCost | None = None):
    """u = u* − L (x̂ − x*); rows of ``x_hat`` are batch entries.

    Works on single vectors, row batches, and taped values.
    """
    if cost is None:
        xs = us = None
    else:
        xs, us = cost.state_target, cost.control_target
    if isinstance(x_hat, ad.Node):
        dev = x_hat if xs is None or not np.any(xs) else ad.sub(x_hat, xs)
        u = ad.neg(ad.matmul(dev, np.asarray(L).T))
        return u if us is None or not np.any(us) else ad.add(u, us)
    x_hat = np.asarray(x_hat, dtype=np.float64)
    dev = x_hat if xs is None else x_hat - xs
    u = -(dev @ np.asarray(L).T)
    return u if us is None else u + us
