"""PPO with the feasibility-dependent hybrid advantage, plus the PPO / FPPO-RS / Standard variants."""
from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .. import nn
from ..feasibility.advantage import feasibility_advantage
from ..nn import OptimizerState
from .policy import PolicyNet, ValueNet


class ConfigError(ValueError):
    """Invalid or incomplete training configuration."""


@dataclass
class TrainConfig:
    gamma: float = 0.98
    gae_lambda: float = 0.98
    clip_eps: float = 0.2
    ent_coef: float = 0.01
    batch_size: int = 256
    horizon: int = 2048
    update_repeats: int = 4
    lr: float = 3e-4
    total_steps: int = 200_000
    max_grad_norm: float = 0.5
    f_max: float = 8.0
    p_max: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if not (0.0 < self.gamma <= 1.0 and 0.0 < self.gae_lambda <= 1.0):
            raise ConfigError("gamma and gae_lambda must lie in (0, 1]")
        if not 0.0 < self.clip_eps < 1.0:
            raise ConfigError("clip_eps must lie in (0, 1)")
        if self.batch_size < 1 or self.horizon < self.batch_size or self.update_repeats < 1:
            raise ConfigError("need 1 <= batch_size <= horizon and update_repeats >= 1")
        if self.f_max <= 0:
            raise ConfigError("f_max must be positive")
        if self.lr < 0 or self.total_steps < 0:
            raise ConfigError("lr and total_steps must be non-negative")

    @property
    def n_updates(self) -> int:
        return max(1, -(-self.total_steps // self.horizon))

    @property
    def optimizer_steps(self) -> int:
        return self.n_updates * self.update_repeats * (-(-self.horizon // self.batch_size))


# ------------------------------------------------------------------ formulas

def gae_linked(rewards, values, next_values, terminal, seg_end, link, gamma: float, lam: float):
    """GAE over interleaved segments. ``link[t]`` is the index of the next step of the same segment."""
    rewards, values, next_values = (np.asarray(x, dtype=float) for x in (rewards, values, next_values))
    terminal = np.asarray(terminal, dtype=bool)
    seg_end = np.asarray(seg_end, dtype=bool)
    n = len(rewards)
    if not (len(values) == len(next_values) == len(terminal) == len(seg_end) == len(link) == n):
        raise ValueError("gae inputs must have equal lengths")
    delta = rewards + gamma * np.where(terminal, 0.0, next_values) - values
    adv = np.zeros(n)
    for t in range(n - 1, -1, -1):
        adv[t] = delta[t] if seg_end[t] else delta[t] + gamma * lam * adv[link[t]]
    return adv, adv + values


def gae(rewards, values, next_value: float, dones, gamma: float = 0.98, lam: float = 0.98):
    """Generalized advantage estimates for one contiguous segment.

    ``dones[t]`` means the episode terminated after step t (no bootstrap).
    Returns (advantages, value targets).
    """
    rewards = np.asarray(rewards, dtype=float)
    values = np.asarray(values, dtype=float)
    dones = np.asarray(dones, dtype=bool)
    if not (len(rewards) == len(values) == len(dones)):
        raise ValueError("rewards, values and dones must have equal lengths")
    n = len(rewards)
    next_values = np.append(values[1:], next_value)
    seg_end = dones.copy()
    if n:
        seg_end[-1] = True
    return gae_linked(rewards, values, next_values, dones, seg_end, np.arange(1, n + 1), gamma, lam)


def hybrid_advantage(a_r, a_h, v_s, v_next):
    """Reward advantage when both endpoints are feasible (V <= 0), else the feasibility term."""
    inside = (np.asarray(v_s) <= 0.0) & (np.asarray(v_next) <= 0.0)
    out = np.where(inside, a_r, a_h)
    return float(out) if out.ndim == 0 else out


def ppo_clip_term(ratio, advantage, eps: float = 0.2):
    ratio = np.asarray(ratio, dtype=float)
    advantage = np.asarray(advantage, dtype=float)
    out = np.minimum(ratio * advantage, np.clip(ratio, 1.0 - eps, 1.0 + eps) * advantage)
    return float(out) if out.ndim == 0 else out


def fppo_rs_reward(r, v_h, f_max: float = 8.0, p_max: float = 1.0):
    if f_max <= 0:
        raise ValueError("f_max must be positive")
    out = np.asarray(r, dtype=float) - np.clip(v_h, 0.0, f_max) * p_max / f_max
    return float(out) if out.ndim == 0 else out


# --------------------------------------------------------------------- modes

MODES = ("FREA", "PPO", "FPPO-RS", "Standard")


@dataclass(frozen=True)
class ModeSpec:
    name: str
    learns: bool
    needs_feasibility: bool
    hybrid: bool
    shaped_reward: bool


def select_mode(mode: str, feasibility=None) -> ModeSpec:
    """Wire the advantage/reward pipeline for a training mode."""
    specs = {
        "FREA": ModeSpec("FREA", True, True, True, False),
        "PPO": ModeSpec("PPO", True, False, False, False),
        "FPPO-RS": ModeSpec("FPPO-RS", True, True, False, True),
        "Standard": ModeSpec("Standard", False, False, False, False),
    }
    if mode not in specs:
        raise ConfigError(f"unknown mode {mode!r}; expected one of {', '.join(MODES)}")
    spec = specs[mode]
    if spec.needs_feasibility and feasibility is None:
        raise ConfigError(f"mode {mode} requires a feasibility checkpoint")
    return spec


# -------------------------------------------------------------------- buffer

BUFFER_FIELDS = ("obs", "u", "log_prob", "reward", "v_r", "h", "h_next", "v_h", "v_h_next")


@dataclass
class SealedBatch:
    obs: np.ndarray
    u: np.ndarray
    log_prob: np.ndarray
    reward: np.ndarray
    v_r: np.ndarray
    h: np.ndarray
    h_next: np.ndarray
    v_h: np.ndarray
    v_h_next: np.ndarray
    next_v_r: np.ndarray
    done: np.ndarray
    truncated: np.ndarray
    seg_end: np.ndarray
    link: np.ndarray
    n_segments: int

    def __len__(self) -> int:
        return len(self.reward)


class RolloutBuffer:
    """Per-CBV segments interleaved in collection order.

    Each CBV's steps form one segment; a segment ends by termination (no
    bootstrap) or truncation (bootstrap from the critic at the last state).
    """

    def __init__(self, horizon: int):
        self.horizon = horizon
        self.cols: dict[str, list] = {k: [] for k in BUFFER_FIELDS}
        self.link: list[int] = []
        self.done: list[bool] = []
        self.truncated: list[bool] = []
        self.seg_end: list[bool] = []
        self.bootstrap: list[float] = []
        self.open: dict = {}
        self.n_segments = 0
        self.sealed = False

    def __len__(self) -> int:
        return len(self.link)

    def full(self) -> bool:
        return len(self) >= self.horizon

    def add(self, key, **values) -> int:
        if self.sealed:
            raise RuntimeError("buffer is sealed")
        if set(values) != set(BUFFER_FIELDS):
            raise ValueError(f"buffer rows need exactly {BUFFER_FIELDS}")
        idx = len(self)
        for k in BUFFER_FIELDS:
            self.cols[k].append(values[k])
        self.link.append(-1)
        self.done.append(False)
        self.truncated.append(False)
        self.seg_end.append(False)
        self.bootstrap.append(0.0)
        if key in self.open:
            self.link[self.open[key]] = idx
        self.open[key] = idx
        return idx

    def end_segment(self, key, terminated: bool, bootstrap_value: float = 0.0) -> None:
        idx = self.open.pop(key, None)
        if idx is None:
            return
        self.seg_end[idx] = True
        self.done[idx] = bool(terminated)
        self.truncated[idx] = not terminated
        self.bootstrap[idx] = 0.0 if terminated else float(bootstrap_value)
        self.n_segments += 1

    def open_keys(self) -> list:
        return list(self.open)

    def seal(self) -> SealedBatch:
        if self.open:
            raise RuntimeError(f"segments still open: {sorted(map(str, self.open))}")
        self.sealed = True
        v_r = np.asarray(self.cols["v_r"], dtype=float)
        link = np.asarray(self.link, dtype=np.int64)
        seg_end = np.asarray(self.seg_end, dtype=bool)
        next_v = np.where(seg_end, np.asarray(self.bootstrap), v_r[np.where(seg_end, 0, link)] if len(v_r) else v_r)
        return SealedBatch(
            np.asarray(self.cols["obs"], dtype=float), np.asarray(self.cols["u"], dtype=float),
            np.asarray(self.cols["log_prob"], dtype=float), np.asarray(self.cols["reward"], dtype=float), v_r,
            np.asarray(self.cols["h"], dtype=float), np.asarray(self.cols["h_next"], dtype=float),
            np.asarray(self.cols["v_h"], dtype=float), np.asarray(self.cols["v_h_next"], dtype=float),
            next_v, np.asarray(self.done), np.asarray(self.truncated), seg_end, link, self.n_segments,
        )


def compute_advantages(batch: SealedBatch, spec: ModeSpec, config: TrainConfig) -> tuple[np.ndarray, np.ndarray]:
    """Mode-specific (advantages, critic targets), before normalization."""
    rewards = batch.reward
    if spec.shaped_reward:
        rewards = fppo_rs_reward(rewards, batch.v_h, config.f_max, config.p_max)
    a_r, targets = gae_linked(rewards, batch.v_r, batch.next_v_r, batch.done, batch.seg_end, batch.link,
                              config.gamma, config.gae_lambda)
    if spec.hybrid:
        # the CBV minimizes the AV's violation, i.e. ascends the negated feasibility advantage
        a_h = feasibility_advantage(batch.h, batch.h_next, batch.v_h, batch.v_h_next)
        a_r = hybrid_advantage(a_r, -np.asarray(a_h), batch.v_h, batch.v_h_next)
    return np.asarray(a_r, dtype=float), targets


# -------------------------------------------------------------------- update

@dataclass
class Learner:
    policy: PolicyNet
    critic: ValueNet
    pi_opt: OptimizerState
    v_opt: OptimizerState

    @classmethod
    def create(cls, policy: PolicyNet, critic: ValueNet, config: TrainConfig) -> "Learner":
        total = config.optimizer_steps
        return cls(policy, critic,
                   OptimizerState.for_params(policy.trunk.arrays() + [policy.log_std], config.lr, total),
                   OptimizerState.for_params(critic.params, config.lr, total))

    def snapshot(self):
        copy_opt = lambda o: OptimizerState(o.base_lr, o.total_steps, [m.copy() for m in o.m], [v.copy() for v in o.v],
                                            o.step, o.beta1, o.beta2, o.eps)
        return self.policy.copy(), self.critic.copy(), copy_opt(self.pi_opt), copy_opt(self.v_opt)

    def restore(self, snap) -> None:
        self.policy, self.critic, self.pi_opt, self.v_opt = snap


@dataclass
class UpdateStats:
    policy_loss: float = 0.0
    value_loss: float = 0.0
    entropy: float = 0.0
    clip_fraction: float = 0.0
    approx_kl: float = 0.0
    first_ratio_max_dev: float = 0.0
    minibatches: int = 0
    aborted: bool = False


def policy_gradients(policy: PolicyNet, obs, u, log_prob_old, adv, config: TrainConfig):
    """Loss = -mean(clip surrogate) - ent_coef * entropy, with its exact gradients."""
    x = policy._x(obs)
    mu, cache = nn.forward_cached(policy.trunk, x)
    std = np.exp(policy.log_std)
    # same expression as at collection time, so the first ratios are exactly 1
    logp = policy.log_prob(None, u, mu)
    ratio = np.exp(logp - log_prob_old)
    eps = config.clip_eps
    surrogate = ppo_clip_term(ratio, adv, eps)
    entropy = policy.entropy()
    n = len(adv)
    loss = -float(np.mean(surrogate)) - config.ent_coef * entropy
    clipped = ((adv > 0) & (ratio > 1.0 + eps)) | ((adv < 0) & (ratio < 1.0 - eps))
    g_logp = np.where(clipped, 0.0, -adv * ratio / n)
    z = (u - mu) / std
    g_mu = g_logp[:, None] * z / std
    g_log_std = np.sum(g_logp[:, None] * (z * z - 1.0), axis=0) - config.ent_coef
    g_trunk = nn.backward(policy.trunk, x, g_mu, cache)
    info = {"ratio": ratio, "clipped": clipped, "logp": logp}
    return loss, g_trunk, g_log_std, info


def value_gradients(critic: ValueNet, obs, targets):
    """Smooth-L1 (beta = 1) loss between V_r and the GAE targets."""
    x = np.asarray(obs, dtype=float)
    x = x.reshape(x.shape[0], -1) / critic.scale
    v, cache = nn.forward_cached(critic.params, x)
    d = v[:, 0] - targets
    ad = np.abs(d)
    loss = float(np.mean(np.where(ad < 1.0, 0.5 * d * d, ad - 0.5)))
    g = np.clip(d, -1.0, 1.0) / len(d)
    return loss, nn.backward(critic.params, x, g[:, None], cache)


def update_policy(batch: SealedBatch, learner: Learner, spec: ModeSpec, config: TrainConfig,
                  rng: np.random.Generator) -> UpdateStats:
    """Repeat passes over shuffled minibatches; roll back everything on a non-finite value."""
    stats = UpdateStats()
    if not spec.learns or len(batch) == 0:
        return stats
    adv_all, targets = compute_advantages(batch, spec, config)
    snap = learner.snapshot()
    n = len(batch)
    sums = np.zeros(5)
    count = 0
    try:
        for rep in range(config.update_repeats):
            perm = rng.permutation(n)
            for start in range(0, n, config.batch_size):
                idx = perm[start:start + config.batch_size]
                adv = adv_all[idx]
                adv = (adv - adv.mean()) / (adv.std() + 1e-8)
                loss, g_trunk, g_log_std, info = policy_gradients(
                    learner.policy, batch.obs[idx], batch.u[idx], batch.log_prob[idx], adv, config)
                v_loss, g_v = value_gradients(learner.critic, batch.obs[idx], targets[idx])
                if not (np.isfinite(loss) and np.isfinite(v_loss)):
                    raise FloatingPointError("non-finite loss")
                if rep == 0 and start == 0:
                    stats.first_ratio_max_dev = float(np.max(np.abs(info["ratio"] - 1.0)))
                grads, _ = nn.clip_by_global_norm(g_trunk.arrays() + [g_log_std], config.max_grad_norm)
                new = nn.adam_update(learner.pi_opt, learner.policy.trunk.arrays() + [learner.policy.log_std], grads)
                learner.policy = PolicyNet(
                    nn.MlpParams(list(learner.policy.trunk.layer_sizes), new[0:-1:2], new[1:-1:2]),
                    new[-1], learner.policy.scale)
                vg, _ = nn.clip_by_global_norm(g_v.arrays(), config.max_grad_norm)
                vnew = nn.adam_update(learner.v_opt, learner.critic.params.arrays(), vg)
                learner.critic = ValueNet(
                    nn.MlpParams(list(learner.critic.params.layer_sizes), vnew[0::2], vnew[1::2]), learner.critic.scale)
                log_ratio = np.log(info["ratio"])
                sums += [loss, v_loss, learner.policy.entropy(), float(np.mean(info["clipped"])),
                         float(np.mean((info["ratio"] - 1.0) - log_ratio))]
                count += 1
        if not (learner.policy.is_finite() and learner.critic.params.is_finite()):
            raise FloatingPointError("non-finite parameters")
    except FloatingPointError:
        learner.restore(snap)
        stats.aborted = True
        return stats
    mean = sums / max(count, 1)
    stats.policy_loss, stats.value_loss, stats.entropy, stats.clip_fraction, stats.approx_kl = map(float, mean)
    stats.minibatches = count
    return stats


# ----------------------------------------------------------------- telemetry

TELEMETRY_FIELDS = ["step", "update", "episode_return", "episodes", "clip_fraction", "entropy", "policy_loss",
                    "value_loss", "approx_kl", "mean_v_h", "collisions", "aborted"]


class TelemetryWriter:
    def __init__(self, path, append: bool = False):
        self.path = Path(path)
        new = not (append and self.path.exists())
        self._f = open(self.path, "w" if new else "a", newline="")
        self._w = csv.DictWriter(self._f, fieldnames=TELEMETRY_FIELDS, lineterminator="\n")
        if new:
            self._w.writeheader()

    def write(self, row: dict) -> None:
        self._w.writerow({k: _fmt(row.get(k, "")) for k in TELEMETRY_FIELDS})
        self._f.flush()

    def close(self) -> None:
        self._f.close()


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


def config_dict(config: TrainConfig) -> dict:
    return asdict(config)


def config_from_dict(d: dict) -> TrainConfig:
    known = {f.name for f in fields(TrainConfig)}
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"unknown training keys: {sorted(unknown)}")
    return TrainConfig(**d)
