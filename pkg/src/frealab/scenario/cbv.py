"""CBV selection, goal assignment, withdrawal and the goal-based adversarial reward."""
from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field
from enum import Enum

from ..world.vehicle import Role
from ..world.world import WorldState, set_role

SELECT_RADIUS = 25.0
GOAL_RADIUS = 2.0
GOAL_LOOKAHEAD = 15.0
MAX_ACTIVE = 2
MAX_DURATION = 20.0
BLOCK_SPEED = 0.1
BLOCK_TIME = 5.0
COLLISION_WEIGHT = 15.0
FINISH_WEIGHT = 15.0
# opposing traffic: heading within this angle of anti-parallel, laterally within this offset
OPPOSING_ANGLE = math.radians(30.0)
OPPOSING_LATERAL = 8.0


class Reject(str, Enum):
    OPPOSING = "case1_opposing_lane"
    TOO_FAR = "case2_distance"
    BEHIND = "case3_behind"
    RETIRED = "case4_retired"


class Withdraw(str, Enum):
    GOAL = "case1_goal"
    BEHIND = "case2_behind"
    BLOCKING = "case3_blocking"
    TIMEOUT = "case3_timeout"
    COLLISION = "case4_collision"


TERMINATED = {Withdraw.GOAL, Withdraw.COLLISION}


@dataclass
class CbvInfo:
    goal: tuple[float, float]
    promoted_at: float
    prev_dist: float
    blocked_for: float = 0.0

    def age(self, now: float) -> float:
        return now - self.promoted_at


@dataclass
class CbvRegistry:
    max_active: int = MAX_ACTIVE
    max_duration: float = MAX_DURATION
    goal_lookahead: float = GOAL_LOOKAHEAD
    active: dict[int, CbvInfo] = field(default_factory=dict)
    retired: set[int] = field(default_factory=set)

    def copy(self) -> "CbvRegistry":
        return copy.deepcopy(self)

    def check(self) -> None:
        if set(self.active) & self.retired:
            raise AssertionError("a vehicle is both active and retired")
        if len(self.active) > self.max_active:
            raise AssertionError("too many active CBVs")


def _av_frame(world: WorldState, v) -> tuple[float, float, float]:
    av = world.av
    dx, dy = v.position[0] - av.position[0], v.position[1] - av.position[1]
    c, s = math.cos(av.yaw), math.sin(av.yaw)
    rel_yaw = math.atan2(math.sin(v.yaw - av.yaw), math.cos(v.yaw - av.yaw))
    return c * dx + s * dy, -s * dx + c * dy, rel_yaw


def behind_and_diverging(world: WorldState, vid: int) -> bool:
    """Behind the AV with a heading difference above 90 degrees."""
    x, _, rel_yaw = _av_frame(world, world.vehicle(vid))
    return x < 0.0 and abs(rel_yaw) > math.pi / 2


def av_distance(world: WorldState, vid: int) -> float:
    v, av = world.vehicle(vid), world.av
    return math.hypot(v.position[0] - av.position[0], v.position[1] - av.position[1])


def cbv_eligible(world: WorldState, bv_id: int, registry: CbvRegistry | None = None) -> tuple[bool, Reject | None]:
    v = world.vehicle(bv_id)
    if v.role is not Role.BV:
        raise ValueError(f"vehicle {bv_id} is {v.role.value}, not a BV")
    x, y, rel_yaw = _av_frame(world, v)
    if abs(rel_yaw) > math.pi - OPPOSING_ANGLE and abs(y) < OPPOSING_LATERAL and _opposing_lane(world, v):
        return False, Reject.OPPOSING
    if math.hypot(x, y) > SELECT_RADIUS:
        return False, Reject.TOO_FAR
    if x < 0.0 and abs(rel_yaw) > math.pi / 2:
        return False, Reject.BEHIND
    if registry is not None and bv_id in registry.retired:
        return False, Reject.RETIRED
    return True, None


def _opposing_lane(world: WorldState, v) -> bool:
    """The BV drives on a lane that runs against the AV's lane at their positions."""
    layout = world.layout
    av = world.av
    lane_v = layout.lanes[v.lane]
    lane_a = layout.lanes[av.lane]
    hv = lane_v.heading_at(lane_v.project(*v.position)[0])
    ha = lane_a.heading_at(lane_a.project(*av.position)[0])
    return math.cos(hv - ha) < -math.cos(OPPOSING_ANGLE)


def assign_goal(world: WorldState, cbv_id: int | None = None, lookahead: float = GOAL_LOOKAHEAD) -> tuple[float, float]:
    """Point on the AV route ``lookahead`` metres ahead of the AV (clamped to the route end)."""
    av = world.av
    lane = world.layout.lanes[av.lane]
    s, _ = lane.project(*av.position)
    p = lane.point_at(min(s + lookahead, lane.length))
    return float(p[0]), float(p[1])


def goal_distance(world: WorldState, vid: int, goal) -> float:
    v = world.vehicle(vid)
    return math.hypot(v.position[0] - goal[0], v.position[1] - goal[1])


def cbv_maintain(world: WorldState, registry: CbvRegistry) -> tuple[WorldState, CbvRegistry, list[int]]:
    """Promote nearest eligible BVs (lower id on ties) until the active set is full."""
    registry = registry.copy()
    promoted = []
    while len(registry.active) < registry.max_active:
        cands = [(av_distance(world, v.id), v.id) for v in world.vehicles
                 if v.role is Role.BV and cbv_eligible(world, v.id, registry)[0]]
        if not cands:
            break
        _, vid = min(cands)
        world = set_role(world, vid, Role.CBV)
        goal = assign_goal(world, vid, registry.goal_lookahead)
        registry.active[vid] = CbvInfo(goal, world.time, goal_distance(world, vid, goal))
        promoted.append(vid)
    return world, registry, promoted


def _vehicle_waiting_behind(world: WorldState, vid: int) -> bool:
    me = world.vehicle(vid)
    c, s = math.cos(me.yaw), math.sin(me.yaw)
    for o in world.vehicles:
        if o.id == vid:
            continue
        dx, dy = o.position[0] - me.position[0], o.position[1] - me.position[1]
        x, y = c * dx + s * dy, -s * dx + c * dy
        if -15.0 < x < 0.0 and abs(y) < 2.0 and math.cos(o.yaw - me.yaw) > 0.5 and o.speed < 1.0:
            return True
    return False


def update_blocking(world: WorldState, registry: CbvRegistry) -> None:
    """Advance each active CBV's blocking timer by one step (mutates ``registry``)."""
    for vid, info in registry.active.items():
        if world.has(vid) and world.vehicle(vid).speed < BLOCK_SPEED and _vehicle_waiting_behind(world, vid):
            info.blocked_for += world.dt
        else:
            info.blocked_for = 0.0


def cbv_withdraw_check(world: WorldState, registry: CbvRegistry, cbv_id: int,
                       collided: bool = False) -> tuple[Withdraw, bool] | None:
    """Withdrawal case and whether it terminates (True) or truncates (False) the CBV's episode."""
    info = registry.active[cbv_id]
    if collided:
        return Withdraw.COLLISION, True
    if goal_distance(world, cbv_id, info.goal) <= GOAL_RADIUS:
        return Withdraw.GOAL, True
    if behind_and_diverging(world, cbv_id):
        return Withdraw.BEHIND, False
    if info.blocked_for >= BLOCK_TIME - 1e-9:
        return Withdraw.BLOCKING, False
    if info.age(world.time) > registry.max_duration + 1e-9:
        return Withdraw.TIMEOUT, False
    return None


def adversarial_reward(prev_dist: float, cur_dist: float, collided: bool, reached: bool) -> float:
    """Progress towards the goal, -15 for hitting a BV, +15 for reaching the goal."""
    return (prev_dist - cur_dist) - COLLISION_WEIGHT * float(collided) + FINISH_WEIGHT * float(reached)


def within_goal(dist: float) -> bool:
    return dist <= GOAL_RADIUS


def nearest_first(world: WorldState, ids) -> list[int]:
    return sorted(ids, key=lambda i: (av_distance(world, i), i))

