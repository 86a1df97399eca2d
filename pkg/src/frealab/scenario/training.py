"""On-policy CBV training over scenario episodes, with checkpoints and telemetry."""
from __future__ import annotations

import json
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .. import nn
from ..adversary.policy import PolicyNet, ValueNet
from ..adversary.ppo import Learner, RolloutBuffer, TelemetryWriter, TrainConfig, select_mode, update_policy
from .episode import EpisodeConfig, EpisodeRunner, LearnedCbvPolicy


def substream(seed: int, name: str, *extra: int) -> np.random.Generator:
    """Independent generator for a named purpose (world, policy-init, action, minibatch, ...)."""
    return np.random.default_rng([seed, zlib.crc32(name.encode()), *extra])


def episode_seed(seed: int, index: int) -> int:
    return int(substream(seed, "world", index).integers(2**31))


@dataclass
class TrainState:
    steps: int = 0
    updates: int = 0
    episodes: int = 0
    history: list[dict] = field(default_factory=list)


def save_cbv_checkpoint(path, learner: Learner, mode: str, state: TrainState, rngs: dict, meta: dict | None = None):
    nn.save_checkpoint(
        path, {"policy": learner.policy.trunk, "critic": learner.critic.params},
        {"pi": learner.pi_opt, "v": learner.v_opt},
        {"log_std": learner.policy.log_std, "policy_scale": learner.policy.scale, "critic_scale": learner.critic.scale},
        {"kind": "cbv", "mode": mode, "steps": state.steps, "updates": state.updates, "episodes": state.episodes,
         "rng": {k: r.bit_generator.state for k, r in rngs.items()}, **(meta or {})},
    )


def load_cbv_checkpoint(path) -> tuple[Learner, dict]:
    ck = nn.load_checkpoint(path)
    if ck["meta"].get("kind") != "cbv":
        raise ValueError(f"{path} is not a CBV policy checkpoint")
    ex = ck["extra"]
    policy = PolicyNet(ck["nets"]["policy"], ex["log_std"], ex["policy_scale"])
    critic = ValueNet(ck["nets"]["critic"], ex["critic_scale"])
    return Learner(policy, critic, ck["optimizers"]["pi"], ck["optimizers"]["v"]), ck["meta"]


def _json_state(state):
    # bit_generator states contain python ints that json round-trips exactly
    return json.loads(json.dumps(state))


def train_cbv(mode: str, episode_cfg: EpisodeConfig, cfg: TrainConfig, feasibility=None, telemetry_path=None,
              checkpoint_path=None, resume: bool = False, checkpoint_every: int = 10, progress=None,
              checkpoint_meta: dict | None = None):
    """Collect CBV rollouts and update the shared policy until ``cfg.total_steps`` CBV steps.

    Returns (learner, TrainState).  ``mode="Standard"`` performs no updates.
    """
    spec = select_mode(mode, feasibility)
    seed = cfg.seed
    rngs = {"action": substream(seed, "action"), "minibatch": substream(seed, "minibatch")}
    state = TrainState()
    if resume and checkpoint_path is not None and Path(checkpoint_path).exists():
        learner, meta = load_cbv_checkpoint(checkpoint_path)
        if meta["mode"] != mode:
            raise ValueError(f"checkpoint was trained in mode {meta['mode']}, not {mode}")
        state.steps, state.updates, state.episodes = meta["steps"], meta["updates"], meta["episodes"]
        for k, r in rngs.items():
            r.bit_generator.state = _json_state(meta["rng"][k])
    else:
        init = substream(seed, "policy-init")
        learner = Learner.create(PolicyNet.init(episode_cfg.obs_dim, init), ValueNet.init(episode_cfg.obs_dim, init), cfg)
    if not spec.learns:
        return learner, state

    telemetry = TelemetryWriter(telemetry_path, append=resume) if telemetry_path else None
    controller = LearnedCbvPolicy(learner.policy)
    runner = None
    buffer = RolloutBuffer(cfg.horizon)
    last_next: dict = {}
    ep_returns, ep_collisions, finished_returns = 0.0, 0, []
    try:
        while state.steps < cfg.total_steps:
            if runner is None or runner.done:
                if runner is not None:
                    finished_returns.append(sum(runner.returns.values()))
                    ep_collisions += int(runner.av_collision)
                runner = EpisodeRunner(episode_cfg, episode_seed(seed, state.episodes), controller, feasibility,
                                       uid=state.episodes, record=False)
                state.episodes += 1
            controller.policy = learner.policy
            for tr in runner.step(rngs["action"]):
                v_r = float(learner.critic(tr.obs.reshape(1, -1))[0])
                buffer.add(tr.segment, obs=tr.obs.ravel(), u=tr.u, log_prob=tr.log_prob, reward=tr.reward, v_r=v_r,
                           h=tr.h, h_next=tr.h_next, v_h=tr.v_h, v_h_next=tr.v_h_next)
                state.steps += 1
                if tr.ended:
                    boot = 0.0 if tr.terminated else float(learner.critic(tr.next_obs.reshape(1, -1))[0])
                    buffer.end_segment(tr.segment, tr.terminated, boot)
                    last_next.pop(tr.segment, None)
                else:
                    last_next[tr.segment] = tr.next_obs
            if buffer.full() or state.steps >= cfg.total_steps:
                for key in buffer.open_keys():
                    buffer.end_segment(key, False, float(learner.critic(last_next.pop(key).reshape(1, -1))[0]))
                batch = buffer.seal()
                stats = update_policy(batch, learner, spec, cfg, rngs["minibatch"])
                state.updates += 1
                finite_vh = batch.v_h[np.isfinite(batch.v_h)]
                row = {
                    "step": state.steps, "update": state.updates,
                    "episode_return": float(np.mean(finished_returns)) if finished_returns else float("nan"),
                    "episodes": len(finished_returns), "clip_fraction": stats.clip_fraction, "entropy": stats.entropy,
                    "policy_loss": stats.policy_loss, "value_loss": stats.value_loss, "approx_kl": stats.approx_kl,
                    "mean_v_h": float(finite_vh.mean()) if len(finite_vh) else float("nan"),
                    "collisions": ep_collisions, "aborted": stats.aborted,
                }
                state.history.append(row)
                if telemetry:
                    telemetry.write(row)
                if progress:
                    progress(row)
                finished_returns, ep_collisions = [], 0
                buffer = RolloutBuffer(cfg.horizon)
                last_next = {}
                if checkpoint_path is not None and (state.updates % checkpoint_every == 0 or state.steps >= cfg.total_steps):
                    # an interrupted run restarts from a fresh episode after the last checkpoint
                    save_cbv_checkpoint(checkpoint_path, learner, mode, state, rngs, checkpoint_meta)
    finally:
        if telemetry:
            telemetry.close()
    return learner, state
