"""Linear-Gaussian state-space models and the ground-truth simulator.

    x_t = F x_{t-1} + G u_{t-1} + w_t,   w_t ~ N(0, W)
    y_t = H x_t + v_t,                   v_t ~ N(0, V)

Batched quantities are stored as rows: a batch of states has shape (B, m).
"""
from __future__ import annotations

import enum
import functools
from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from .autodiff import DimensionError


def _as_matrix(a, name):
    a = np.array(a, dtype=np.float64)
    if a.ndim == 1:
        a = a[:, None]
    if a.ndim != 2:
        raise DimensionError(f"{name} must be a matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} has non-finite entries")
    return a


@dataclass(frozen=True, eq=False)
class StateSpaceModel:
    F: np.ndarray
    G: np.ndarray
    H: np.ndarray
    W: np.ndarray
    V: np.ndarray

    def __post_init__(self):
        for name in "FGHWV":
            object.__setattr__(self, name, _as_matrix(getattr(self, name), name))
        m = self.F.shape[0]
        if self.F.shape != (m, m):
            raise DimensionError(f"F must be square, got {self.F.shape}")
        if self.G.shape[0] != m:
            raise DimensionError(f"G has {self.G.shape[0]} rows, expected {m}")
        if self.H.shape[1] != m:
            raise DimensionError(f"H has {self.H.shape[1]} columns, expected {m}")
        n = self.H.shape[0]
        if self.W.shape != (m, m):
            raise DimensionError(f"W must be {m}x{m}, got {self.W.shape}")
        if self.V.shape != (n, n):
            raise DimensionError(f"V must be {n}x{n}, got {self.V.shape}")
        for name in "WV":
            cov = getattr(self, name)
            if not np.allclose(cov, cov.T, atol=1e-12):
                raise ValueError(f"{name} is not symmetric")
            if np.min(np.linalg.eigvalsh(cov)) < -1e-12:
                raise ValueError(f"{name} is not positive semi-definite")

    @property
    def m(self) -> int:
        return self.F.shape[0]

    @property
    def q(self) -> int:
        return self.G.shape[1]

    @property
    def n(self) -> int:
        return self.H.shape[0]

    def with_noise(self, W, V) -> "StateSpaceModel":
        return replace(self, W=W, V=V)

    def __eq__(self, other):
        if not isinstance(other, StateSpaceModel):
            return NotImplemented
        return all(np.array_equal(getattr(self, k), getattr(other, k)) for k in "FGHWV")


def db_to_linear(db: float) -> float:
    """Power decibels to a linear value: 10^(dB/10)."""
    return float(10.0 ** (db / 10.0))


@dataclass(frozen=True)
class NoiseSpec:
    sigma_w_db: float = 0.0
    sigma_v_db: float = 0.0

    @classmethod
    def equal(cls, db: float) -> "NoiseSpec":
        return cls(db, db)

    @property
    def process_variance(self) -> float:
        return db_to_linear(self.sigma_w_db)

    @property
    def observation_variance(self) -> float:
        return db_to_linear(self.sigma_v_db)


def noise_covariances(spec: NoiseSpec, m: int, n: int) -> tuple[np.ndarray, np.ndarray]:
    """Diagonal W = σ_w² I_m and V = σ_v² I_n."""
    if m <= 0 or n <= 0:
        raise DimensionError(f"dimensions must be positive, got m={m}, n={n}")
    return spec.process_variance * np.eye(m), spec.observation_variance * np.eye(n)


def design_model(noise: NoiseSpec | float = 0.0) -> StateSpaceModel:
    """Discrete double integrator with full-state observation (m=n=2, q=1)."""
    if not isinstance(noise, NoiseSpec):
        noise = NoiseSpec.equal(float(noise))
    W, V = noise_covariances(noise, 2, 2)
    return StateSpaceModel(
        F=np.array([[1.0, 1.0], [0.0, 1.0]]),
        G=np.array([[0.0], [1.0]]),
        H=np.eye(2),
        W=W,
        V=V,
    )


class MismatchTarget(str, enum.Enum):
    NONE = "none"
    EVOLUTION = "evolution"
    OBSERVATION = "observation"


@dataclass(frozen=True)
class MismatchSpec:
    target: MismatchTarget = MismatchTarget.NONE
    alpha_degrees: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "target", MismatchTarget(self.target))
        if not np.isfinite(self.alpha_degrees):
            raise ValueError("rotation angle must be finite")


def rotation(alpha_degrees: float) -> np.ndarray:
    a = np.deg2rad(alpha_degrees)
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s], [s, c]])


def apply_mismatch(design: StateSpaceModel, spec: MismatchSpec) -> StateSpaceModel:
    """Ground-truth model: the targeted matrix left-multiplied by R_α."""
    if spec.target is MismatchTarget.NONE or spec.alpha_degrees == 0.0:
        return design
    name = "F" if spec.target is MismatchTarget.EVOLUTION else "H"
    target = getattr(design, name)
    if target.shape != (2, 2):
        raise DimensionError(f"rotation mismatch needs a 2x2 {name}, got {target.shape}")
    return replace(design, **{name: rotation(spec.alpha_degrees) @ target})


def _sqrt_factor(cov: np.ndarray) -> np.ndarray:
    """Lower factor S with S Sᵀ = cov; falls back to eigh for singular PSD."""
    if not np.any(cov):
        return np.zeros_like(cov)
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        vals, vecs = np.linalg.eigh(cov)
        return vecs * np.sqrt(np.clip(vals, 0.0, None))


def advance(model: StateSpaceModel, x, u, w, v):
    """One transition on row-batched (possibly taped) arrays: returns (x', y')."""
    x_next = ad.add(ad.add(ad.matmul(x, model.F.T), ad.matmul(u, model.G.T)), w)
    y_next = ad.add(ad.matmul(x_next, model.H.T), v)
    return x_next, y_next


class Simulator:
    """Seeded single-trajectory simulator of the ground-truth model.

    The generator is Philox (counter-based), so a trajectory depends only on
    its seed. When ``x0_std > 0`` the initial state is drawn once as
    x0 + x0_std * N(0, I) before any noise.
    """

    def __init__(self, truth: StateSpaceModel, x0, seed: int | np.random.SeedSequence = 0, x0_std: float = 0.0):
        self.truth = truth
        x0 = np.array(x0, dtype=np.float64).reshape(-1)
        if x0.shape != (truth.m,):
            raise DimensionError(f"x0 has {x0.size} entries, expected {truth.m}")
        self.rng = np.random.Generator(np.random.Philox(seed))
        if x0_std > 0.0:
            x0 = x0 + x0_std * self.rng.standard_normal(truth.m)
        self.x0 = x0
        self.x = x0.copy()

    @functools.cached_property
    def _w_factor(self):
        return _sqrt_factor(self.truth.W)

    @functools.cached_property
    def _v_factor(self):
        return _sqrt_factor(self.truth.V)

    def draw_standard(self, steps: int) -> np.ndarray:
        """Standard-normal draws for ``steps`` transitions, shape (steps, m + n).

        Row t holds the process draws then the observation draws of one
        step; block size does not change the stream.
        """
        return self.rng.standard_normal((steps, self.truth.m + self.truth.n))

    def draw_noise(self) -> tuple[np.ndarray, np.ndarray]:
        z = self.draw_standard(1)[0]
        m = self.truth.m
        return self._w_factor @ z[:m], self._v_factor @ z[m:]

    def step(self, u) -> tuple[np.ndarray, np.ndarray]:
        u = np.asarray(u, dtype=np.float64).reshape(-1)
        if u.shape != (self.truth.q,):
            raise DimensionError(f"control has {u.size} entries, expected {self.truth.q}")
        w, v = self.draw_noise()
        x, y = advance(self.truth, self.x[None], u[None], w[None], v[None])
        self.x = x[0]
        return self.x.copy(), y[0]


def trajectory_seeds(base_seed: int, count: int, stream: int = 0) -> list[np.random.SeedSequence]:
    """Independent per-trajectory seeds, reproducible from (base_seed, stream)."""
    return np.random.SeedSequence(base_seed, spawn_key=(stream,)).spawn(count)


class BatchSimulator:
    """A batch of independent :class:`Simulator` streams stepped together.

    ``step`` accepts taped controls; the noise draws enter the tape as
    constants, so the rollout is differentiable pathwise. Noise is drawn
    in blocks of ``BLOCK`` steps per stream.
    """

    BLOCK = 128

    def __init__(self, truth: StateSpaceModel, x0, seeds, x0_std: float = 0.0):
        self.truth = truth
        self.sims = [Simulator(truth, x0, s, x0_std) for s in seeds]
        self.x0 = np.stack([s.x0 for s in self.sims]) if self.sims else np.zeros((0, truth.m))
        self.x = self.x0.copy()
        self._w_factor = _sqrt_factor(truth.W)
        self._v_factor = _sqrt_factor(truth.V)
        self._block = np.zeros((len(self.sims), 0, truth.m + truth.n))
        self._pos = 0

    def __len__(self):
        return len(self.sims)

    def step(self, u):
        shape = ad.value_of(u).shape
        if shape != (len(self.sims), self.truth.q):
            raise DimensionError(f"controls have shape {shape}, expected {(len(self.sims), self.truth.q)}")
        if self._pos == self._block.shape[1]:
            self._block = np.stack([s.draw_standard(self.BLOCK) for s in self.sims], axis=0)
            self._pos = 0
        z = self._block[:, self._pos]
        self._pos += 1
        m = self.truth.m
        w = z[:, :m] @ self._w_factor.T
        v = z[:, m:] @ self._v_factor.T
        self.x, y = advance(self.truth, self.x, u, w, v)
        return self.x, y
