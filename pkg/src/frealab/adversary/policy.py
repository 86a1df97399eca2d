"""Squashed-Gaussian CBV policy and reward critic over flattened pseudo-states."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .. import nn
from ..nn import MlpParams
from ..world.observation import N_FEATURES
from ..world.vehicle import ACCEL_BOUND, STEER_BOUND, Action

ACTION_BOUNDS = np.array([ACCEL_BOUND, STEER_BOUND])
LOG_STD_INIT = math.log(0.5)
HIDDEN = (256, 256)
# per-column scale for (rel_x, rel_y, extent_x, extent_y, rel_yaw, speed)
COLUMN_SCALE = np.array([20.0, 20.0, 2.5, 1.0, math.pi, 10.0])
_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


def obs_scale(n_rows: int) -> np.ndarray:
    return np.tile(COLUMN_SCALE, n_rows)


def _log_squash_jacobian(u: np.ndarray) -> np.ndarray:
    """sum_j log(bound_j * (1 - tanh(u_j)^2)), computed without cancellation."""
    log1m_tanh2 = 2.0 * (math.log(2.0) - u - np.logaddexp(0.0, -2.0 * u))
    return np.sum(np.log(ACTION_BOUNDS) + log1m_tanh2, axis=-1)


def squash(u) -> np.ndarray:
    return ACTION_BOUNDS * np.tanh(u)


@dataclass
class PolicyNet:
    trunk: MlpParams
    log_std: np.ndarray
    scale: np.ndarray

    @classmethod
    def init(cls, obs_dim: int, rng: np.random.Generator, hidden=HIDDEN, scale=None) -> "PolicyNet":
        trunk = MlpParams.init([obs_dim, *hidden, 2], rng, output_gain=0.01)
        if scale is None:
            scale = obs_scale(obs_dim // N_FEATURES) if obs_dim % N_FEATURES == 0 else np.ones(obs_dim)
        return cls(trunk, np.full(2, LOG_STD_INIT), np.asarray(scale, dtype=float))

    def copy(self) -> "PolicyNet":
        return PolicyNet(self.trunk.copy(), self.log_std.copy(), self.scale.copy())

    def is_finite(self) -> bool:
        return self.trunk.is_finite() and bool(np.all(np.isfinite(self.log_std)))

    def _x(self, obs) -> np.ndarray:
        obs = np.asarray(obs, dtype=float)
        return obs.reshape(obs.shape[0], -1) / self.scale

    def mean(self, obs_batch) -> np.ndarray:
        return nn.forward(self.trunk, self._x(obs_batch))

    def sample(self, obs_batch, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        """Pre-squash samples ``u`` and their log-probabilities under the squashed policy."""
        mu = self.mean(obs_batch)
        u = mu + np.exp(self.log_std) * rng.standard_normal(mu.shape)
        return u, self.log_prob(obs_batch, u, mu)

    def log_prob(self, obs_batch, u, mu=None) -> np.ndarray:
        """Exact log-density of the squashed action; ``mu`` skips the forward pass."""
        if mu is None:
            mu = self.mean(obs_batch)
        return gaussian_log_prob(u, mu, self.log_std) - _log_squash_jacobian(u)

    def deterministic(self, obs_batch) -> np.ndarray:
        return squash(self.mean(obs_batch))

    def entropy(self) -> float:
        """Entropy of the pre-squash Gaussian (state independent)."""
        return float(np.sum(self.log_std + 0.5 + _HALF_LOG_2PI))


def gaussian_log_prob(u, mu, log_std) -> np.ndarray:
    z = (u - mu) / np.exp(log_std)
    return np.sum(-0.5 * z * z - log_std - _HALF_LOG_2PI, axis=-1)


def to_action(u_row) -> Action:
    a = squash(np.asarray(u_row, dtype=float))
    return Action(float(a[0]), float(a[1]))


@dataclass
class ValueNet:
    params: MlpParams
    scale: np.ndarray

    @classmethod
    def init(cls, obs_dim: int, rng: np.random.Generator, hidden=HIDDEN, scale=None) -> "ValueNet":
        if scale is None:
            scale = obs_scale(obs_dim // N_FEATURES) if obs_dim % N_FEATURES == 0 else np.ones(obs_dim)
        return cls(MlpParams.init([obs_dim, *hidden, 1], rng, output_gain=1.0), np.asarray(scale, dtype=float))

    def copy(self) -> "ValueNet":
        return ValueNet(self.params.copy(), self.scale.copy())

    def __call__(self, obs_batch) -> np.ndarray:
        obs = np.asarray(obs_batch, dtype=float)
        return nn.forward(self.params, obs.reshape(obs.shape[0], -1) / self.scale)[:, 0]
