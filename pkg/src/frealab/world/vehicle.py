"""Vehicle state, bounded actions and kinematic bicycle integration."""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from enum import Enum

import numpy as np

ACCEL_BOUND = 3.0
STEER_BOUND = 0.3
WHEELBASE = 2.5
# |steer| = 0.3 maps to a 0.3 rad wheel angle.
STEER_GAIN = 1.0


class Role(str, Enum):
    AV = "AV"
    BV = "BV"
    CBV = "CBV"


def wrap_angle(a: float) -> float:
    """Wrap an angle into (-pi, pi]."""
    a = math.fmod(a + math.pi, 2.0 * math.pi)
    if a <= 0.0:
        a += 2.0 * math.pi
    return a - math.pi


@dataclass(frozen=True)
class Action:
    accel: float = 0.0
    steer: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "accel", float(min(ACCEL_BOUND, max(-ACCEL_BOUND, self.accel))))
        object.__setattr__(self, "steer", float(min(STEER_BOUND, max(-STEER_BOUND, self.steer))))

    def as_array(self) -> np.ndarray:
        return np.array([self.accel, self.steer])


@dataclass(frozen=True)
class VehicleState:
    id: int
    position: tuple[float, float]
    yaw: float
    speed: float
    extent: tuple[float, float] = (2.25, 0.9)
    role: Role = Role.BV
    lane: int = -1

    def __post_init__(self):
        hl, hw = self.extent
        if not (hl > 0 and hw > 0):
            raise ValueError(f"vehicle {self.id}: extents must be positive, got {self.extent}")
        if self.speed < 0:
            raise ValueError(f"vehicle {self.id}: negative speed {self.speed}")
        object.__setattr__(self, "position", (float(self.position[0]), float(self.position[1])))
        object.__setattr__(self, "extent", (float(hl), float(hw)))
        object.__setattr__(self, "yaw", wrap_angle(float(self.yaw)))
        object.__setattr__(self, "speed", float(self.speed))
        object.__setattr__(self, "role", Role(self.role))

    @property
    def x(self) -> float:
        return self.position[0]

    @property
    def y(self) -> float:
        return self.position[1]

    @property
    def velocity(self) -> np.ndarray:
        return np.array([self.speed * math.cos(self.yaw), self.speed * math.sin(self.yaw)])

    def with_role(self, role: Role, lane: int | None = None) -> "VehicleState":
        return replace(self, role=role, lane=self.lane if lane is None else lane)


def step_vehicle(state: VehicleState, action: Action, dt: float) -> VehicleState:
    """Advance one vehicle by ``dt`` seconds.

    Speed is floored at zero, yaw rate follows the kinematic bicycle with the
    pre-step speed, and the position moves at the mean speed along the mean
    heading of the step.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    if not isinstance(action, Action):
        action = Action(*action)
    v0 = state.speed
    v1 = max(0.0, v0 + action.accel * dt)
    yaw_rate = (v0 / WHEELBASE) * math.tan(STEER_GAIN * action.steer)
    yaw1 = state.yaw + yaw_rate * dt
    heading = 0.5 * (state.yaw + yaw1)
    vm = 0.5 * (v0 + v1)
    x = state.position[0] + vm * math.cos(heading) * dt
    y = state.position[1] + vm * math.sin(heading) * dt
    return replace(state, position=(x, y), yaw=yaw1, speed=v1)
