"""World state, the sparse constraint function and deterministic world stepping."""
from __future__ import annotations

import hashlib
import math
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .drivers import AV_DRIVER, BV_DRIVER, DriverParams, rule_action
from .geometry import bbox_distance_lower_bound, contact_point, min_bbox_distance
from .layout import RoadLayout
from .vehicle import Action, Role, VehicleState, step_vehicle, wrap_angle

D_TH = 0.1
VIOLATION = 18.0
SAFE = -1.0


@dataclass(frozen=True)
class TrafficConfig:
    desired_speed: float = 6.0
    mean_headway: float = 6.0
    min_headway: float = 2.0
    max_vehicles: int = 16
    approach_zone: float = 12.0
    route_weights: tuple[float, float, float] = (0.5, 0.25, 0.25)


@dataclass(frozen=True)
class CollisionEvent:
    time: float
    ids: tuple[int, int]
    relative_speed: float
    contact: tuple[float, float]
    velocities: tuple[tuple[float, float], tuple[float, float]]
    positions: tuple[tuple[float, float], tuple[float, float]]


@dataclass
class StepInfo:
    collisions: list[CollisionEvent]
    h: float
    actions: dict[int, Action]
    leaders: dict[int, int | None] = field(default_factory=dict)


@dataclass(frozen=True)
class WorldState:
    time: float
    dt: float
    vehicles: tuple[VehicleState, ...]
    layout: RoadLayout
    rng_seed: int
    step: int = 0
    next_id: int = 0
    traffic: TrafficConfig = TrafficConfig()
    requests: tuple[tuple[int, float], ...] = ()
    granted: frozenset = frozenset()
    next_spawn: tuple[float, ...] = ()

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        ids = [v.id for v in self.vehicles]
        if len(set(ids)) != len(ids):
            raise ValueError("vehicle ids must be unique")
        if sum(v.role is Role.AV for v in self.vehicles) != 1:
            raise ValueError("world needs exactly one AV")

    @property
    def av(self) -> VehicleState:
        for v in self.vehicles:
            if v.role is Role.AV:
                return v
        raise AssertionError("no AV")

    def vehicle(self, vid: int) -> VehicleState:
        for v in self.vehicles:
            if v.id == vid:
                return v
        raise KeyError(f"unknown vehicle id {vid}")

    def has(self, vid: int) -> bool:
        return any(v.id == vid for v in self.vehicles)

    def others(self, vid: int) -> list[VehicleState]:
        return [v for v in self.vehicles if v.id != vid]

    def replace_vehicles(self, vehicles) -> "WorldState":
        vehicles = tuple(vehicles)
        keep = {v.id for v in vehicles}
        return replace(
            self,
            vehicles=vehicles,
            granted=frozenset(g for g in self.granted if g in keep),
            requests=tuple(r for r in self.requests if r[0] in keep),
        )

    def digest(self) -> str:
        """SHA-256 over every float of the dynamic state (bit-exact)."""
        h = hashlib.sha256()
        h.update(struct.pack("<dqq", self.time, self.step, self.next_id))
        for v in self.vehicles:
            h.update(struct.pack("<q6d", v.id, v.position[0], v.position[1], v.yaw, v.speed, *v.extent))
            h.update(v.role.value.encode())
            h.update(struct.pack("<q", v.lane))
        return h.hexdigest()


def min_distance_to_av(world: WorldState) -> float:
    av = world.av
    best = math.inf
    for v in world.vehicles:
        if v.id != av.id:
            best = min(best, min_bbox_distance(av, v))
    return best


def h_from_distance(distance: float, d_th: float = D_TH, m: float = VIOLATION) -> float:
    return SAFE if distance > d_th else m


def constraint_h(world: WorldState, d_th: float = D_TH, m: float = VIOLATION) -> float:
    """-1 when every other vehicle is farther than ``d_th`` from the AV box, else ``m``."""
    av = world.av
    for v in world.vehicles:
        if v.id == av.id or bbox_distance_lower_bound(av, v) > d_th:
            continue
        if min_bbox_distance(av, v) <= d_th:
            return m
    return SAFE


def detect_collisions(vehicles, time: float) -> list[CollisionEvent]:
    events = []
    vs = sorted(vehicles, key=lambda v: v.id)
    for i, a in enumerate(vs):
        for b in vs[i + 1:]:
            if bbox_distance_lower_bound(a, b) > 0.0:
                continue
            if min_bbox_distance(a, b) == 0.0:
                va, vb = a.velocity, b.velocity
                events.append(
                    CollisionEvent(
                        time=time,
                        ids=(a.id, b.id),
                        relative_speed=float(np.hypot(*(va - vb))),
                        contact=contact_point(a, b),
                        velocities=(tuple(va.tolist()), tuple(vb.tolist())),
                        positions=(a.position, b.position),
                    )
                )
    return events


def _route_alternatives(layout: RoadLayout, lane: int) -> list[int]:
    start = layout.lanes[lane].points[0]
    return [i for i, ln in enumerate(layout.lanes) if np.allclose(ln.points[0], start)]


def stop_line(world: WorldState, v: VehicleState) -> float | None:
    """Arc length to hold at while ``v`` approaches the junction without a reservation."""
    lane = world.layout.lanes[v.lane]
    if lane.box_entry is None or v.id in world.granted:
        return None
    s, _ = lane.project(*v.position)
    if s < lane.box_entry and lane.box_entry - s - v.extent[0] < world.traffic.approach_zone:
        return lane.box_entry - 1.0
    return None


def step_world(
    world: WorldState,
    cbv_actions: dict[int, Action] | None = None,
    av_params: DriverParams = AV_DRIVER,
    bv_params: DriverParams = BV_DRIVER,
) -> tuple[WorldState, StepInfo]:
    """Advance the whole world one ``dt``.

    Background vehicles and the AV follow their lanes with rule-based
    control; CBVs apply the supplied actions.  Same input world and actions
    always produce the same output bit for bit.
    """
    cbv_actions = cbv_actions or {}
    layout = world.layout
    vehicles = world.vehicles
    actions: dict[int, Action] = {}
    leaders: dict[int, int | None] = {}

    requests = dict(world.requests)
    granted = set(world.granted)

    for v in vehicles:
        stop = stop_line(world, v)
        if stop is not None:
            requests.setdefault(v.id, world.time)
        if v.role is Role.CBV:
            if v.id not in cbv_actions:
                raise KeyError(f"no action supplied for CBV {v.id}")
            a = cbv_actions[v.id]
            actions[v.id] = a if isinstance(a, Action) else Action(*a)
            continue
        lane = layout.lanes[v.lane]
        params = av_params if v.role is Role.AV else bv_params
        others = [o for o in vehicles if o.id != v.id]
        actions[v.id], leader = rule_action(v, lane, others, params, stop)
        leaders[v.id] = leader.id if leader else None

    moved = [step_vehicle(v, actions[v.id], world.dt) for v in vehicles]
    time = world.time + world.dt
    step = world.step + 1

    # intersection reservations: release after exit, then grant first-come first-served
    by_id = {v.id: v for v in moved}
    for vid in list(granted):
        v = by_id.get(vid)
        if v is None:
            granted.discard(vid)
            continue
        lane = layout.lanes[v.lane]
        s, _ = lane.project(*v.position)
        if s - v.extent[0] > lane.box_exit:
            granted.discard(vid)
    for vid, t_req in sorted(requests.items(), key=lambda kv: (kv[1], kv[0])):
        if vid not in by_id or vid in granted:
            continue
        mine = by_id[vid].lane
        if not any(layout.conflicts[mine, by_id[g].lane] for g in granted):
            granted.add(vid)
    requests = {k: t for k, t in requests.items() if k in by_id and k not in granted}

    # despawn finished background vehicles
    kept = []
    for v in moved:
        if v.role is Role.BV:
            lane = layout.lanes[v.lane]
            s, _ = lane.project(*v.position)
            if s >= lane.length - 2.0:
                granted.discard(v.id)
                requests.pop(v.id, None)
                continue
        kept.append(v)

    next_spawn = list(world.next_spawn) or [0.0] * len(layout.spawn_slots)
    next_id = world.next_id
    tc = world.traffic
    for k, slot in enumerate(layout.spawn_slots):
        if time < next_spawn[k] or len(kept) >= tc.max_vehicles:
            continue
        if any(math.hypot(v.position[0] - slot.x, v.position[1] - slot.y) < 12.0 for v in kept):
            continue
        rng = np.random.default_rng([world.rng_seed, step, k])
        alts = _route_alternatives(layout, slot.lane)
        weights = np.array(tc.route_weights[: len(alts)], dtype=float)
        lane_idx = alts[int(rng.choice(len(alts), p=weights / weights.sum()))]
        kept.append(VehicleState(next_id, (slot.x, slot.y), slot.yaw, tc.desired_speed, role=Role.BV, lane=lane_idx))
        next_id += 1
        next_spawn[k] = time + tc.min_headway + float(rng.exponential(tc.mean_headway))

    new = replace(
        world,
        time=time,
        step=step,
        vehicles=tuple(kept),
        next_id=next_id,
        requests=tuple(sorted(requests.items())),
        granted=frozenset(granted),
        next_spawn=tuple(next_spawn),
    )
    info = StepInfo(detect_collisions(new.vehicles, time), constraint_h(new), actions, leaders)
    return new, info


def remove_vehicles(world: WorldState, ids) -> WorldState:
    ids = set(ids)
    return world.replace_vehicles(v for v in world.vehicles if v.id not in ids)


def _still_on_lane(lane, v: VehicleState) -> bool:
    s, lat = lane.project(*v.position)
    dyaw = abs(math.remainder(v.yaw - lane.heading_at(s), 2 * math.pi))
    return abs(lat) < 0.5 * lane.width and dyaw < math.pi / 4 and s < lane.length - 1.0


def set_role(world: WorldState, vid: int, role: Role) -> WorldState:
    """Promote to CBV or revert to BV (re-attaching to the best-matching lane)."""
    out = []
    for v in world.vehicles:
        if v.id == vid:
            lane = v.lane
            if role is Role.BV and not _still_on_lane(world.layout.lanes[lane], v):
                lane = world.layout.nearest_lane(v.position[0], v.position[1], v.yaw)
            v = v.with_role(role, lane)
        out.append(v)
    return world.replace_vehicles(out)


def initial_world(
    layout: RoadLayout,
    seed: int,
    av_lane: int | None = None,
    av_start: float = 15.0,
    n_background: int = 8,
    dt: float = 0.1,
    traffic: TrafficConfig = TrafficConfig(),
    av_speed: float | None = None,
) -> WorldState:
    """Place the AV and a seeded random background population on the layout."""
    rng = np.random.default_rng([seed, 7919])
    av_lane = layout.av_lanes[0] if av_lane is None else av_lane
    lane = layout.lanes[av_lane]
    p = lane.point_at(av_start)
    av = VehicleState(0, (p[0], p[1]), lane.heading_at(av_start), traffic.desired_speed if av_speed is None else av_speed,
                      role=Role.AV, lane=av_lane)
    vehicles = [av]
    next_id = 1
    attempts = 0
    while len(vehicles) < n_background + 1 and attempts < 50 * (n_background + 1):
        attempts += 1
        li = int(rng.integers(len(layout.lanes)))
        ln = layout.lanes[li]
        s = float(rng.uniform(5.0, ln.length - 10.0))
        if ln.box_entry is not None and ln.box_entry - 6.0 < s < ln.box_exit + 3.0:
            continue
        q = ln.point_at(s)
        if any(math.hypot(q[0] - v.position[0], q[1] - v.position[1]) < 11.0 for v in vehicles):
            continue
        # keep the AV's own approach clear of queued traffic right behind it
        if li == av_lane and s < av_start:
            continue
        speed = float(rng.uniform(0.6, 1.0)) * traffic.desired_speed
        vehicles.append(VehicleState(next_id, (q[0], q[1]), ln.heading_at(s), speed, role=Role.BV, lane=li))
        next_id += 1
    spawn = tuple(float(rng.uniform(0.0, traffic.mean_headway)) for _ in layout.spawn_slots)
    return WorldState(0.0, dt, tuple(vehicles), layout, seed, 0, next_id, traffic, (), frozenset(), spawn)


def relative_yaw(a: VehicleState, b: VehicleState) -> float:
    return wrap_angle(b.yaw - a.yaw)
