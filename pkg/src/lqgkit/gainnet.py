"""Recurrent network that emits a surrogate Kalman gain each step.

Architecture: a rectified linear embedding of the step features, one gated
recurrent unit (GRU) cell, and a linear head reshaped to an m x n gain.

Features at step t (each block normalized by its per-dimension running RMS):

    innovation              y_t - ŷ_{t|t-1}
    observation difference  y_t - y_{t-1}
    forward update diff.    x̂_{t-1} - x̂_{t-1|t-2}

Checkpoint file layout (JSON, UTF-8)::

    {"format": "lqgkit-gainnet", "version": 1,
     "m": 2, "n": 2, "embed_size": 40, "hidden_size": 40, "seed": 0,
     "theta": [ ...flattened weights, shortest round-trip decimal... ]}

``theta`` is ordered as :meth:`GainNetParams.layout`, each block row-major.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad

CHECKPOINT_FORMAT = "lqgkit-gainnet"
CHECKPOINT_VERSION = 1
RMS_FLOOR = 1e-8


@dataclass(frozen=True)
class ArchConfig:
    """Layer sizes; ``None`` means the default of 10 (m + n)."""

    embed_size: int | None = None
    hidden_size: int | None = None

    def resolve(self, m: int, n: int) -> "ArchConfig":
        default = 10 * (m + n)
        return ArchConfig(self.embed_size or default, self.hidden_size or default)


def feature_dim(m: int, n: int) -> int:
    return 2 * n + m


def _layout(m: int, n: int, arch: ArchConfig) -> list[tuple[str, tuple[int, ...]]]:
    d, h1, h2 = feature_dim(m, n), arch.embed_size, arch.hidden_size
    return [
        ("embed_W", (d, h1)),
        ("embed_b", (h1,)),
        ("gru_Wx", (h1, 3 * h2)),
        ("gru_bx", (3 * h2,)),
        ("gru_Wh", (h2, 3 * h2)),
        ("gru_bh", (3 * h2,)),
        ("head_W", (h2, m * n)),
        ("head_b", (m * n,)),
    ]


def _fan_in(name: str, m: int, n: int, arch: ArchConfig) -> int:
    if name.startswith("embed"):
        return feature_dim(m, n)
    return arch.hidden_size if name.startswith(("gru", "head")) else 1


@dataclass(frozen=True, eq=False)
class GainNetParams:
    """All trainable weights, stored as one flat float64 vector."""

    m: int
    n: int
    arch: ArchConfig
    theta: np.ndarray
    seed: int | None = None

    def __post_init__(self):
        arch = self.arch.resolve(self.m, self.n)
        object.__setattr__(self, "arch", arch)
        theta = np.array(self.theta, dtype=np.float64).reshape(-1)
        if theta.size != param_count(self.m, self.n, arch):
            raise ad.DimensionError(f"theta has {theta.size} entries, expected {param_count(self.m, self.n, arch)}")
        object.__setattr__(self, "theta", theta)

    def layout(self):
        return _layout(self.m, self.n, self.arch)

    def with_theta(self, theta) -> "GainNetParams":
        return replace(self, theta=np.array(theta, dtype=np.float64))

    def unflatten(self, theta=None) -> dict:
        """Named weight blocks. Slices a taped ``theta`` on its tape."""
        theta = self.theta if theta is None else theta
        out, offset = {}, 0
        for name, shape in self.layout():
            size = int(np.prod(shape))
            out[name] = ad.reshape(ad.getitem(theta, slice(offset, offset + size)), shape)
            offset += size
        return out

    @staticmethod
    def flatten(blocks: dict, m: int, n: int, arch: ArchConfig) -> np.ndarray:
        arch = arch.resolve(m, n)
        return np.concatenate([np.asarray(blocks[name], dtype=np.float64).reshape(-1)
                               for name, _ in _layout(m, n, arch)])

    def save(self, path) -> None:
        record = {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "m": self.m,
            "n": self.n,
            "embed_size": self.arch.embed_size,
            "hidden_size": self.arch.hidden_size,
            "seed": self.seed,
            "theta": [float(v) for v in self.theta],
        }
        Path(path).write_text(json.dumps(record) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "GainNetParams":
        record = json.loads(Path(path).read_text(encoding="utf-8"))
        if record.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"{path}: not a gain-network checkpoint")
        if record.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {record.get('version')}")
        arch = ArchConfig(record["embed_size"], record["hidden_size"])
        return cls(record["m"], record["n"], arch, np.array(record["theta"], dtype=np.float64), record["seed"])


def param_count(m: int, n: int, arch: ArchConfig = ArchConfig()) -> int:
    arch = arch.resolve(m, n)
    return sum(int(np.prod(shape)) for _, shape in _layout(m, n, arch))


def init_params(m: int, n: int, arch: ArchConfig = ArchConfig(), seed: int = 0) -> GainNetParams:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) per block, deterministic per seed."""
    if m <= 0 or n <= 0:
        raise ad.DimensionError(f"dimensions must be positive, got m={m}, n={n}")
    arch = arch.resolve(m, n)
    rng = np.random.Generator(np.random.Philox(seed))
    blocks = {}
    for name, shape in _layout(m, n, arch):
        bound = 1.0 / np.sqrt(_fan_in(name, m, n, arch))
        blocks[name] = rng.uniform(-bound, bound, size=shape)
    return GainNetParams(m, n, arch, GainNetParams.flatten(blocks, m, n, arch), seed)


@dataclass(frozen=True)
class GainNetState:
    """Per-trajectory recurrence carrier; rows are batch entries."""

    hidden: object
    prev_posterior: object
    prev_prior: object
    prev_observation: object
    feature_ms: np.ndarray | object
    steps: int = 0

    @classmethod
    def zeros(cls, batch: int, m: int, n: int, hidden_size: int) -> "GainNetState":
        return cls(
            hidden=np.zeros((batch, hidden_size)),
            prev_posterior=np.zeros((batch, m)),
            prev_prior=np.zeros((batch, m)),
            prev_observation=np.zeros((batch, n)),
            feature_ms=np.zeros((batch, feature_dim(m, n))),
        )

    def observed(self, posterior, prior, observation) -> "GainNetState":
        """Record the step's estimates for the next step's features."""
        return replace(self, prev_posterior=posterior, prev_prior=prior, prev_observation=observation)


def build_features(y, state: GainNetState, y_pred) -> tuple[object, GainNetState]:
    """Normalized feature rows and the state with updated running RMS."""
    raw = ad.concat([
        ad.sub(y, y_pred),
        ad.sub(y, state.prev_observation),
        ad.sub(state.prev_posterior, state.prev_prior),
    ], axis=-1)
    steps = state.steps + 1
    # running mean of squares: ms_t = ms_{t-1} + (f² - ms_{t-1}) / t
    ms = ad.add(state.feature_ms, ad.div(ad.sub(ad.square(raw), state.feature_ms), float(steps)))
    features = ad.div(raw, ad.sqrt(ad.add(ms, RMS_FLOOR ** 2)))
    return features, replace(state, feature_ms=ms, steps=steps)


def gain_step(weights, state: GainNetState, features, m: int | None = None,
              n: int | None = None) -> tuple[object, GainNetState]:
    """One recurrent step: returns gains of shape (B, m, n) and the new state.

    ``weights`` is a :class:`GainNetParams` or the block dict from
    :meth:`GainNetParams.unflatten` (taped or not; dims then required).
    """
    if isinstance(weights, GainNetParams):
        m, n = weights.m, weights.n
        weights = weights.unflatten()
    e = ad.relu(ad.affine(features, weights["embed_W"], weights["embed_b"]))
    h_new = ad.gru_cell(e, state.hidden, weights["gru_Wx"], weights["gru_bx"], weights["gru_Wh"], weights["gru_bh"])
    out = ad.affine(h_new, weights["head_W"], weights["head_b"])
    batch = ad.value_of(out).shape[0]
    return ad.reshape(out, (batch, m, n)), replace(state, hidden=h_new)
