"""Episode orchestration: CBV registry upkeep, rewards, logging and offline data collection."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from ..adversary.policy import PolicyNet, to_action
from ..feasibility.dataset import DatasetWriter, TransitionRecord
from ..world.drivers import BV_DRIVER, rule_action
from ..world.geometry import min_bbox_distance
from ..world.layout import get_layout
from ..world.observation import encode_pseudo_state, nearest_vehicle_id, pseudo_state_shape
from ..world.trajlog import TrajectoryWriter, step_record
from ..world.vehicle import ACCEL_BOUND, STEER_BOUND, Action, Role
from ..world.world import (
    TrafficConfig, WorldState, constraint_h, initial_world, remove_vehicles, set_role, step_world, stop_line,
)
from .cbv import (
    TERMINATED,
    CbvRegistry,
    Withdraw,
    adversarial_reward,
    assign_goal,
    cbv_maintain,
    cbv_withdraw_check,
    goal_distance,
    update_blocking,
    within_goal,
)


@dataclass(frozen=True)
class EpisodeConfig:
    layout: str = "intersection"
    n_background: int = 10
    max_time: float = 40.0
    dt: float = 0.1
    max_active: int = 2
    max_duration: float = 20.0
    goal_lookahead: float = 15.0
    n_nearby: int = 3
    av_start: float = 15.0
    max_vehicles: int = 16

    def __post_init__(self):
        if self.max_time <= 0 or self.dt <= 0:
            raise ValueError("max_time and dt must be positive")
        if self.max_active < 0 or self.n_nearby < 0:
            raise ValueError("max_active and n_nearby must be non-negative")

    @property
    def obs_shape(self) -> tuple[int, int]:
        return pseudo_state_shape(self.n_nearby)

    @property
    def obs_dim(self) -> int:
        r, c = self.obs_shape
        return r * c


# --------------------------------------------------------------- controllers

class LearnedCbvPolicy:
    """Shared CBV policy; samples during training, mean action when deterministic."""

    def __init__(self, policy: PolicyNet, deterministic: bool = False):
        self.policy = policy
        self.deterministic = deterministic

    def act(self, world, ids, obs, rng):
        if not ids:
            return [], None, None
        flat = obs.reshape(len(ids), -1)
        if self.deterministic:
            u = self.policy.mean(flat)
            return [to_action(r) for r in u], u, None
        u, logp = self.policy.sample(flat, rng)
        return [to_action(r) for r in u], u, logp


class RuleCbvPolicy:
    """CBVs keep driving like background traffic (the Standard baseline)."""

    def act(self, world, ids, obs, rng):
        out = []
        for vid in ids:
            v = world.vehicle(vid)
            a, _ = rule_action(v, world.layout.lanes[v.lane], world.others(vid), BV_DRIVER, stop_line(world, v))
            out.append(a)
        return out, None, None


class AggressiveCbvPolicy:
    """Scripted attacker: full throttle up to ``top_speed``, steering straight at the goal."""

    def __init__(self, top_speed: float = 9.0, gain: float = 1.5):
        self.top_speed = top_speed
        self.gain = gain
        self.goals: dict[int, tuple[float, float]] = {}

    def act(self, world, ids, obs, rng):
        out = []
        for k, vid in enumerate(ids):
            v = world.vehicle(vid)
            # goal row of the pseudo-state is in the AV frame; recover world coordinates
            av = world.av
            gx, gy = obs[k, 1, 0], obs[k, 1, 1]
            c, s = math.cos(av.yaw), math.sin(av.yaw)
            wx, wy = av.position[0] + c * gx - s * gy, av.position[1] + s * gx + c * gy
            err = math.atan2(wy - v.position[1], wx - v.position[0]) - v.yaw
            err = math.atan2(math.sin(err), math.cos(err))
            accel = ACCEL_BOUND if v.speed < self.top_speed else 0.0
            out.append(Action(accel, float(np.clip(self.gain * err, -STEER_BOUND, STEER_BOUND))))
        return out, None, None


class RandomCbvPolicy:
    def act(self, world, ids, obs, rng):
        a = rng.uniform(-1.0, 1.0, size=(len(ids), 2)) * [ACCEL_BOUND, STEER_BOUND]
        return [Action(float(x), float(y)) for x, y in a], None, None


# ------------------------------------------------------------------ episodes

@dataclass
class CbvTransition:
    """One CBV step, ready for the rollout buffer."""
    cbv_id: int
    segment: tuple
    obs: np.ndarray
    u: np.ndarray | None
    log_prob: float | None
    reward: float
    next_obs: np.ndarray
    h: float
    h_next: float
    v_h: float
    v_h_next: float
    ended: bool = False
    terminated: bool = False
    case: str | None = None


@dataclass
class EpisodeResult:
    seed: int
    records: list[dict]
    returns: dict[int, float]
    events: list[dict]
    av_collision: bool
    reason: str
    steps: int
    av_lane: int
    log_path: str | None = None

    @property
    def h_series(self) -> list[float]:
        return [r["h"] for r in self.records]

    @property
    def v_h_series(self) -> list[float]:
        return [r["v_h"] for r in self.records]


def _feas_value(feasibility, obs_rows: np.ndarray) -> np.ndarray:
    if feasibility is None or len(obs_rows) == 0:
        return np.full(len(obs_rows), np.nan)
    return np.asarray(feasibility.values(obs_rows.reshape(len(obs_rows), -1)), dtype=float)


def av_pseudo_state(world: WorldState, registry: CbvRegistry, n_nearby: int, subject: int | None = None) -> tuple[np.ndarray, int | None]:
    """Pseudo-state describing the AV's situation, centred on the nearest CBV (or nearest vehicle)."""
    goal = assign_goal(world, None, registry.goal_lookahead)
    if subject is None or not world.has(subject):
        cbvs = [i for i in registry.active if world.has(i)]
        if cbvs:
            av = world.av
            subject = min(cbvs, key=lambda i: (math.hypot(world.vehicle(i).position[0] - av.position[0],
                                                          world.vehicle(i).position[1] - av.position[1]), i))
        else:
            subject = nearest_vehicle_id(world)
    if subject is None:
        out = np.zeros(pseudo_state_shape(n_nearby))
        av = world.av
        out[0] = (0.0, 0.0, av.extent[0], av.extent[1], 0.0, av.speed)
        c, s = math.cos(av.yaw), math.sin(av.yaw)
        dx, dy = goal[0] - av.position[0], goal[1] - av.position[1]
        gx, gy = c * dx + s * dy, -s * dx + c * dy
        out[1] = (gx, gy, 0.0, 0.0, 0.0, math.hypot(gx, gy))
        return out, None
    return encode_pseudo_state(world, subject, goal, n_nearby), subject


def _nearest_cbv_distance(world: WorldState, ids) -> float | None:
    av = world.av
    ds = [min_bbox_distance(av, world.vehicle(i)) for i in ids if world.has(i)]
    return min(ds) if ds else None


class EpisodeRunner:
    """Step an episode one world tick at a time.

    ``feasibility`` (anything with ``values(batch)``) supplies V_h of the
    pseudo-states; without it V_h entries are NaN.
    """

    def __init__(self, config: EpisodeConfig, seed: int, controller, feasibility=None, uid=0,
                 record: bool = True, layout=None):
        self.config = config
        self.seed = seed
        self.controller = controller
        self.feasibility = feasibility
        self.uid = uid
        self.record = record
        layout = layout or get_layout(config.layout)
        av_lane = layout.av_lanes[seed % len(layout.av_lanes)]
        self.av_lane = av_lane
        traffic = TrafficConfig(max_vehicles=config.max_vehicles)
        self.world = initial_world(layout, seed, av_lane, config.av_start, config.n_background, config.dt, traffic)
        self.registry = CbvRegistry(config.max_active, config.max_duration, config.goal_lookahead)
        self.records: list[dict] = []
        self.events: list[dict] = []
        self.returns: dict[int, float] = {}
        self.done = False
        self.reason = ""
        self.av_collision = False
        self.steps = 0
        self._segment: dict[int, tuple] = {}
        self.world, self.registry, promoted = cbv_maintain(self.world, self.registry)
        for vid in promoted:
            self._open(vid)

    def _open(self, vid: int) -> None:
        self._segment[vid] = (self.uid, vid, round(self.world.time, 6))
        self.returns.setdefault(vid, 0.0)
        self.events.append({"t": self.world.time, "type": "promote", "id": vid})

    def cbv_ids(self) -> list[int]:
        return sorted(self.registry.active)

    def observe(self, world: WorldState | None = None, ids=None) -> np.ndarray:
        world = world or self.world
        ids = self.cbv_ids() if ids is None else ids
        return np.array([encode_pseudo_state(world, i, self.registry.active[i].goal, self.config.n_nearby) for i in ids]
                        ).reshape(len(ids), *self.config.obs_shape)

    def step(self, rng: np.random.Generator) -> list[CbvTransition]:
        if self.done:
            raise RuntimeError("episode already finished")
        cfg = self.config
        world = self.world
        ids = self.cbv_ids()
        obs = self.observe(world, ids)
        actions, u, logp = self.controller.act(world, ids, obs, rng)
        h = constraint_h(world)
        av_obs, _ = av_pseudo_state(world, self.registry, cfg.n_nearby)

        new, info = step_world(world, dict(zip(ids, actions)))
        h_next = info.h
        av_id = new.av.id
        collided_with: dict[int, set[int]] = {}
        for e in info.collisions:
            a, b = e.ids
            collided_with.setdefault(a, set()).add(b)
            collided_with.setdefault(b, set()).add(a)
            self.events.append({"t": new.time, "type": "collision", "ids": [a, b], "relative_speed": e.relative_speed,
                                "contact": list(e.contact), "velocities": [list(x) for x in e.velocities]})
        av_hit = av_id in collided_with

        # rewards against the freshly assigned goal, then withdrawal checks
        transitions = []
        rewards, withdrawals, hybrid = {}, [], {}
        for vid in ids:
            info_c = self.registry.active[vid]
            info_c.goal = assign_goal(new, vid, self.registry.goal_lookahead)
        update_blocking(new, self.registry)
        next_obs = self.observe(new, ids) if ids else np.zeros((0, *cfg.obs_shape))
        v_h = _feas_value(self.feasibility, obs)
        v_h_next = _feas_value(self.feasibility, next_obs)
        remove, revert = [], []
        for k, vid in enumerate(ids):
            info_c = self.registry.active[vid]
            cur = goal_distance(new, vid, info_c.goal)
            hit = vid in collided_with
            hit_bv = any(o != av_id for o in collided_with.get(vid, ()))
            r = adversarial_reward(info_c.prev_dist, cur, hit_bv, within_goal(cur))
            info_c.prev_dist = cur
            rewards[vid] = r
            self.returns[vid] = self.returns.get(vid, 0.0) + r
            w = cbv_withdraw_check(new, self.registry, vid, hit)
            tr = CbvTransition(vid, self._segment[vid], obs[k], None if u is None else u[k],
                               None if logp is None else float(logp[k]), r, next_obs[k], h, h_next,
                               float(v_h[k]), float(v_h_next[k]))
            if w is not None:
                case, terminated = w
                tr.ended, tr.terminated, tr.case = True, terminated, case.value
                withdrawals.append([vid, case.value])
                self.events.append({"t": new.time, "type": "withdraw", "id": vid, "case": case.value,
                                    "terminated": terminated})
                if case is Withdraw.COLLISION:
                    remove.append(vid)
                else:
                    revert.append((vid, case))
            if not (math.isnan(tr.v_h) or math.isnan(tr.v_h_next)):
                hybrid[str(vid)] = int(tr.v_h <= 0.0 and tr.v_h_next <= 0.0)
            transitions.append(tr)

        av_next_obs, _ = av_pseudo_state(new, self.registry, cfg.n_nearby)
        v_av = _feas_value(self.feasibility, av_next_obs[None])[0]
        self.steps += 1
        if self.record:
            rec = step_record(
                new, h_next, info.collisions,
                v_h=None if math.isnan(v_av) else float(v_av),
                cbvs=ids, rewards={str(k): v for k, v in rewards.items()}, withdrawals=withdrawals,
                hybrid=hybrid, cbv_av_dist=_nearest_cbv_distance(new, ids),
                av_action=[actions_av.accel, actions_av.steer] if (actions_av := info.actions.get(av_id)) else None,
            )
            self.records.append(rec)
        self._last_av = (av_obs, info.actions.get(av_id), av_next_obs, h, h_next)

        # apply withdrawals
        for vid in remove:
            del self.registry.active[vid]
            self._segment.pop(vid, None)
        if remove:
            new = remove_vehicles(new, remove)
        for vid, case in revert:
            del self.registry.active[vid]
            self._segment.pop(vid, None)
            if case is Withdraw.GOAL:
                self.registry.retired.add(vid)
            new = set_role(new, vid, Role.BV)

        # episode end
        lane = new.layout.lanes[new.av.lane]
        s_av, _ = lane.project(*new.av.position)
        if av_hit:
            self.done, self.reason, self.av_collision = True, "av_collision", True
        elif s_av >= lane.length - 3.0:
            self.done, self.reason = True, "route_complete"
        elif new.time >= cfg.max_time - 1e-9:
            self.done, self.reason = True, "time_cap"
        if self.done:
            for tr in transitions:
                if not tr.ended:
                    tr.ended = True
                    tr.terminated = False
                    tr.case = "episode_end"
        else:
            new, self.registry, promoted = cbv_maintain(new, self.registry)
            for vid in promoted:
                self._open(vid)
        self.world = new
        return transitions

    def last_av_transition(self):
        """(pseudo_state, av_action, next_pseudo_state, h, h_next) of the latest step."""
        return self._last_av

    def result(self, log_path=None) -> EpisodeResult:
        if log_path is not None:
            with TrajectoryWriter(log_path, seed=self.seed, layout=self.config.layout, av_lane=self.av_lane,
                                  episode_config=asdict(self.config)) as w:
                for rec in self.records:
                    w.write(rec)
        return EpisodeResult(self.seed, self.records, dict(self.returns), list(self.events), self.av_collision,
                             self.reason, self.steps, self.av_lane, None if log_path is None else str(log_path))


def run_episode(config: EpisodeConfig, controller, seed: int, feasibility=None, rng=None,
                log_path=None, layout=None) -> EpisodeResult:
    """Run to route completion, AV collision or the time cap."""
    rng = rng if rng is not None else np.random.default_rng([seed, 1])
    runner = EpisodeRunner(config, seed, controller, feasibility, layout=layout)
    while not runner.done:
        runner.step(rng)
    return runner.result(log_path)


# ----------------------------------------------------------- offline dataset

SOURCES = ("standard", "aggressive", "random")


def _source_setup(source: str, config: EpisodeConfig):
    if source == "standard":
        return EpisodeConfig(**{**asdict(config), "max_active": 0}), RuleCbvPolicy()
    if source == "aggressive":
        return config, AggressiveCbvPolicy()
    if source == "random":
        return config, RandomCbvPolicy()
    raise ValueError(f"unknown source policy {source!r}")


def split_counts(total: int, mix) -> list[int]:
    mix = np.asarray(mix, dtype=float)
    if len(mix) != len(SOURCES) or np.any(mix < 0) or abs(mix.sum() - 1.0) > 1e-9:
        raise ValueError(f"policy mix must be {len(SOURCES)} non-negative fractions summing to 1")
    counts = np.floor(mix * total).astype(int)
    counts[np.argmax(mix)] += total - counts.sum()
    return counts.tolist()


def collect_offline(config: EpisodeConfig, mix, total: int, seed: int, path, progress=None) -> dict:
    """Write ``total`` AV transitions split across the three source policies.

    Returns per-source record and episode counts.
    """
    if total < 0:
        raise ValueError("total must be non-negative")
    counts = split_counts(total, mix)
    path = Path(path)
    path.unlink(missing_ok=True)
    summary = {}
    with DatasetWriter(path, config.obs_shape) as w:
        for k, (source, quota) in enumerate(zip(SOURCES, counts)):
            cfg, controller = _source_setup(source, config)
            written, episode = 0, 0
            while written < quota:
                ep_seed = int(np.random.default_rng([seed, k, episode]).integers(2**31))
                rng = np.random.default_rng([seed, k, episode, 1])
                runner = EpisodeRunner(cfg, ep_seed, controller, record=False)
                while not runner.done and written < quota:
                    runner.step(rng)
                    s, a, s2, h, h2 = runner.last_av_transition()
                    a = a or Action(0.0, 0.0)
                    w.write(TransitionRecord(s, a, s2, h, h2, runner.done and runner.av_collision, source))
                    written += 1
                episode += 1
                if progress:
                    progress(source, written, quota)
            summary[source] = {"records": written, "episodes": episode}
    return summary
