"""Offline learning of the feasible value functions with reversed expectile regression."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .. import nn
from ..nn import MlpParams, OptimizerState

DEFAULT_TAU = 0.9
DEFAULT_GAMMA = 0.98
SOFT_UPDATE = 5e-3


def expectile_loss(u, tau: float):
    """|tau - 1(u > 0)| * u**2, elementwise."""
    if not 0.5 < tau < 1.0:
        raise ValueError("tau must lie in (0.5, 1)")
    u = np.asarray(u, dtype=float)
    out = np.abs(tau - (u > 0.0)) * u * u
    return float(out) if out.ndim == 0 else out


def qh_target(h, v_next, gamma: float, done=False, h_next=None):
    """(1-gamma) h + gamma max(h, V(s')), evaluated as h + gamma (max(h, V') - h).

    On terminal transitions the bootstrap value is the terminal state's own
    constraint value ``h_next`` (``h`` when it is not given).
    """
    if not 0.0 < gamma < 1.0:
        raise ValueError("gamma must lie in (0, 1)")
    h = np.asarray(h, dtype=float)
    v_next = np.asarray(v_next, dtype=float)
    term = h if h_next is None else np.asarray(h_next, dtype=float)
    v_next = np.where(np.asarray(done, dtype=bool), term, v_next)
    out = h + gamma * (np.maximum(h, v_next) - h)
    return float(out) if out.ndim == 0 else out


@dataclass
class FeasibilityNets:
    v_net: MlpParams
    q_net: MlpParams
    q_target: MlpParams
    obs_scale: np.ndarray
    act_scale: np.ndarray
    tau: float = DEFAULT_TAU
    gamma: float = DEFAULT_GAMMA

    def __post_init__(self):
        if not 0.5 < self.tau < 1.0:
            raise ValueError("expectile tau must lie in (0.5, 1)")
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma must lie in (0, 1)")
        if self.q_target.layer_sizes != self.q_net.layer_sizes:
            raise ValueError("q_target must match q_net")

    @classmethod
    def init(cls, obs_dim: int, act_dim: int, rng: np.random.Generator, hidden=(64, 64),
             obs_scale=None, act_scale=None, tau: float = DEFAULT_TAU, gamma: float = DEFAULT_GAMMA):
        v = MlpParams.init([obs_dim, *hidden, 1], rng)
        q = MlpParams.init([obs_dim + act_dim, *hidden, 1], rng)
        obs_scale = np.ones(obs_dim) if obs_scale is None else np.asarray(obs_scale, dtype=float)
        act_scale = np.ones(act_dim) if act_scale is None else np.asarray(act_scale, dtype=float)
        return cls(v, q, q.copy(), obs_scale, act_scale, tau, gamma)

    @property
    def obs_dim(self) -> int:
        return self.v_net.layer_sizes[0]

    def _obs(self, batch) -> np.ndarray:
        batch = np.asarray(batch, dtype=float)
        return batch.reshape(batch.shape[0], -1) / self.obs_scale

    def value(self, obs) -> float:
        """V_h of a single observation (any shape; flattened)."""
        return float(nn.forward(self.v_net, np.asarray(obs, dtype=float).reshape(-1) / self.obs_scale)[0])

    def values(self, batch) -> np.ndarray:
        """V_h for a batch whose leading axis indexes observations."""
        return nn.forward(self.v_net, self._obs(batch))[:, 0]

    def q_value(self, obs, act, target: bool = False) -> np.ndarray:
        x = np.concatenate([self._obs(np.atleast_2d(obs)), np.atleast_2d(act) / self.act_scale], axis=1)
        return nn.forward(self.q_target if target else self.q_net, x)[:, 0]

    def save(self, path, optimizers=None, meta=None) -> None:
        nn.save_checkpoint(
            path, {"v": self.v_net, "q": self.q_net, "q_target": self.q_target}, optimizers,
            {"obs_scale": self.obs_scale, "act_scale": self.act_scale},
            {"kind": "feasibility", "tau": self.tau, "gamma": self.gamma, **(meta or {})},
        )

    @classmethod
    def load(cls, path) -> tuple["FeasibilityNets", dict]:
        ck = nn.load_checkpoint(path)
        if ck["meta"].get("kind") != "feasibility":
            raise ValueError(f"{path} is not a feasibility checkpoint")
        nets = ck["nets"]
        obj = cls(nets["v"], nets["q"], nets["q_target"], ck["extra"]["obs_scale"], ck["extra"]["act_scale"],
                  ck["meta"]["tau"], ck["meta"]["gamma"])
        return obj, ck


class ConstantFeasibility:
    """Stand-in value function returning a constant (``-1``: everything feasible)."""

    def __init__(self, value: float = -1.0):
        self.constant = float(value)

    def value(self, obs) -> float:
        return self.constant

    def values(self, batch) -> np.ndarray:
        return np.full(len(batch), self.constant)


@dataclass
class OfflineData:
    """Column arrays for offline training (observations already flattened)."""
    obs: np.ndarray
    act: np.ndarray
    next_obs: np.ndarray
    h: np.ndarray
    h_next: np.ndarray
    done: np.ndarray
    source: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.h)


@dataclass
class TrainCurves:
    v_loss: list[float] = field(default_factory=list)
    q_loss: list[float] = field(default_factory=list)
    v_mean: list[float] = field(default_factory=list)


@dataclass
class OfflineTrainer:
    nets: FeasibilityNets
    v_opt: OptimizerState
    q_opt: OptimizerState
    curves: TrainCurves = field(default_factory=TrainCurves)
    steps_done: int = 0

    @classmethod
    def create(cls, nets: FeasibilityNets, total_steps: int, lr: float = 3e-4):
        return cls(nets, OptimizerState.for_params(nets.v_net, lr, total_steps),
                   OptimizerState.for_params(nets.q_net, lr, total_steps))

    def step(self, data: OfflineData, idx: np.ndarray, rho: float = SOFT_UPDATE) -> None:
        nets = self.nets
        s = data.obs[idx] / nets.obs_scale
        a = data.act[idx] / nets.act_scale
        s2 = data.next_obs[idx] / nets.obs_scale
        h, h2, done = data.h[idx], data.h_next[idx], data.done[idx]
        sa = np.concatenate([s, a], axis=1)
        n = len(idx)

        # V_h: reversed expectile of the target Q over dataset actions
        q_t = nn.forward(nets.q_target, sa)[:, 0]
        v, cache = nn.forward_cached(nets.v_net, s)
        u = q_t - v[:, 0]
        weight = np.abs(nets.tau - (u > 0.0))
        v_loss = float(np.mean(weight * u * u))
        gv = nn.backward(nets.v_net, s, (-2.0 * weight * u / n)[:, None], cache)
        nets.v_net = nn.adam_step(self.v_opt, nets.v_net, gv)

        # Q_h: regression onto the discounted feasibility backup
        v_next = nn.forward(nets.v_net, s2)[:, 0]
        y = qh_target(h, v_next, nets.gamma, done, h2)
        q, cache = nn.forward_cached(nets.q_net, sa)
        err = y - q[:, 0]
        q_loss = float(np.mean(err * err))
        gq = nn.backward(nets.q_net, sa, (-2.0 * err / n)[:, None], cache)
        nets.q_net = nn.adam_step(self.q_opt, nets.q_net, gq)
        nets.q_target = nn.soft_update(nets.q_target, nets.q_net, rho)

        self.curves.v_loss.append(v_loss)
        self.curves.q_loss.append(q_loss)
        self.curves.v_mean.append(float(v.mean()))
        self.steps_done += 1


def train_offline(data: OfflineData, nets: FeasibilityNets, steps: int, batch_size: int = 1024,
                  rng: np.random.Generator | None = None, lr: float = 3e-4, rho: float = SOFT_UPDATE,
                  trainer: OfflineTrainer | None = None, callback=None) -> tuple[FeasibilityNets, TrainCurves]:
    """Alternate the V_h (expectile) and Q_h (backup regression) updates for ``steps`` batches."""
    if len(data) == 0:
        raise ValueError("empty dataset")
    batch_size = min(batch_size, len(data))
    rng = rng or np.random.default_rng(0)
    trainer = trainer or OfflineTrainer.create(nets, steps, lr)
    while trainer.steps_done < steps:
        idx = rng.integers(0, len(data), size=batch_size)
        trainer.step(data, idx, rho)
        if callback is not None:
            callback(trainer)
    return trainer.nets, trainer.curves


def grid_dataset(instance) -> OfflineData:
    """Every (cell, action) transition of a grid instance as offline data."""
    mesh = np.meshgrid(*(a.nodes for a in instance.axes), indexing="ij")
    pts = np.stack([m.ravel() for m in mesh], axis=1)
    h = instance.h(pts)
    obs, act, nxt, hs, hn = [], [], [], [], []
    for a in instance.action_set:
        succ = instance.dynamics(pts, a)
        obs.append(pts)
        act.append(np.full((len(pts), 1), a))
        nxt.append(succ)
        hs.append(h)
        hn.append(instance.h(succ))
    obs = np.concatenate(obs)
    return OfflineData(obs, np.concatenate(act), np.concatenate(nxt), np.concatenate(hs), np.concatenate(hn),
                       np.zeros(len(obs), dtype=bool), ["grid"] * len(obs))
