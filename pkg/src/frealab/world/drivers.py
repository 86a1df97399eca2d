"""Rule-based longitudinal/lateral control for background vehicles and the surrogate AV."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .layout import Lane
from .vehicle import ACCEL_BOUND, STEER_BOUND, STEER_GAIN, WHEELBASE, Action, VehicleState


@dataclass(frozen=True)
class DriverParams:
    desired_speed: float = 6.0
    max_accel: float = 2.0
    comfort_decel: float = 3.0
    min_gap: float = 2.0
    time_headway: float = 1.2
    lookahead: float = 40.0
    # surrogate AV only: full brake when time-to-collision to the leader drops below this
    brake_ttc: float | None = None


BV_DRIVER = DriverParams()
AV_DRIVER = DriverParams(brake_ttc=1.5)


@dataclass(frozen=True)
class Leader:
    id: int
    gap: float
    closing_speed: float

    @property
    def ttc(self) -> float | None:
        return self.gap / self.closing_speed if self.closing_speed > 1e-9 else None


def find_leader(me: VehicleState, lane: Lane, s: float, others, lookahead: float) -> Leader | None:
    """First vehicle whose footprint overlaps the path ahead of ``me``."""
    if not others:
        return None
    ds = np.arange(1.0, lookahead + 1.0, 1.0)
    path = lane.points_at(s + ds)
    beyond = s + ds > lane.length
    if beyond.any():
        # extrapolate straight past the lane end so leaders near the end stay visible
        h = lane.heading_at(lane.length)
        extra = (s + ds[beyond]) - lane.length
        end = lane.points[-1]
        path[beyond] = end + extra[:, None] * np.array([math.cos(h), math.sin(h)])
    pos = np.array([o.position for o in others])
    d = np.hypot(path[:, None, 0] - pos[None, :, 0], path[:, None, 1] - pos[None, :, 1])
    hl, hw = me.extent
    best = None
    for j, o in enumerate(others):
        dyaw = o.yaw - me.yaw
        cs, sn = abs(math.cos(dyaw)), abs(math.sin(dyaw))
        lat_ext = o.extent[1] * cs + o.extent[0] * sn
        lon_ext = o.extent[0] * cs + o.extent[1] * sn
        hit = np.flatnonzero(d[:, j] < hw + lat_ext + 0.3)
        if hit.size == 0:
            continue
        gap = max(0.01, ds[hit[0]] - hl - lon_ext)
        if best is None or gap < best.gap:
            closing = me.speed - o.speed * math.cos(dyaw)
            best = Leader(o.id, gap, closing)
    return best


def idm_accel(v: float, params: DriverParams, gap: float | None = None, closing: float = 0.0) -> float:
    a, b = params.max_accel, params.comfort_decel
    acc = a * (1.0 - (v / params.desired_speed) ** 4)
    if gap is not None:
        s_star = params.min_gap + max(0.0, v * params.time_headway + v * closing / (2.0 * math.sqrt(a * b)))
        acc -= a * (s_star / max(gap, 0.01)) ** 2
    return min(ACCEL_BOUND, max(-ACCEL_BOUND, acc))


def pure_pursuit_steer(me: VehicleState, lane: Lane, s: float) -> float:
    ld = max(5.0, 1.0 * me.speed + 3.0)
    tx, ty = lane.point_at(s + ld)
    if s + ld > lane.length:
        h = lane.heading_at(lane.length)
        extra = s + ld - lane.length
        tx, ty = tx + extra * math.cos(h), ty + extra * math.sin(h)
    dx, dy = tx - me.position[0], ty - me.position[1]
    alpha = math.atan2(dy, dx) - me.yaw
    delta = math.atan2(2.0 * WHEELBASE * math.sin(alpha), ld)
    return min(STEER_BOUND, max(-STEER_BOUND, delta / STEER_GAIN))


def rule_action(
    me: VehicleState,
    lane: Lane,
    others,
    params: DriverParams,
    stop_line: float | None = None,
) -> tuple[Action, Leader | None]:
    """Lane following with IDM gap keeping and an optional stop line (arc length)."""
    s, _ = lane.project(*me.position)
    leader = find_leader(me, lane, s, others, params.lookahead)
    gap, closing = (leader.gap, leader.closing_speed) if leader else (None, 0.0)
    if stop_line is not None:
        stop_gap = stop_line - s - me.extent[0]
        # past the line but short of the box: hold rather than creep in unreserved
        if gap is None or stop_gap < gap:
            gap, closing = max(stop_gap, 0.01), me.speed
    accel = idm_accel(me.speed, params, gap, closing)
    if params.brake_ttc is not None and leader is not None:
        ttc = leader.ttc
        if ttc is not None and ttc < params.brake_ttc:
            accel = -ACCEL_BOUND
    return Action(accel, pure_pursuit_steer(me, lane, s)), leader
