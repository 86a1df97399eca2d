"""Per-CBV pseudo-state: a fixed (V+2) x 6 array seen from the AV."""
from __future__ import annotations

import math

import numpy as np

from .vehicle import wrap_angle

N_FEATURES = 6
DEFAULT_NEARBY = 3


def pseudo_state_shape(n_nearby: int = DEFAULT_NEARBY) -> tuple[int, int]:
    return (n_nearby + 2, N_FEATURES)


def encode_pseudo_state(world, cbv_id: int, goal, n_nearby: int = DEFAULT_NEARBY) -> np.ndarray:
    """Encode the scene around the AV for one CBV.

    Frame: origin at the AV, +x along the AV heading.  Row 0 is the AV,
    row 1 the CBV goal (its last column holds the goal distance), row 2 the
    CBV itself and the remaining rows the other vehicles nearest to the AV.
    Columns are (rel_x, rel_y, extent_x, extent_y, rel_yaw, speed); missing
    vehicles leave zero rows.
    """
    if n_nearby < 0:
        raise ValueError("n_nearby must be >= 0")
    av = world.av
    if cbv_id == av.id or not world.has(cbv_id):
        raise KeyError(f"invalid actor reference: no CBV with id {cbv_id}")
    c, s = math.cos(av.yaw), math.sin(av.yaw)
    ax, ay = av.position

    def local(x, y):
        dx, dy = x - ax, y - ay
        return c * dx + s * dy, -s * dx + c * dy

    out = np.zeros((n_nearby + 2, N_FEATURES))
    out[0] = (0.0, 0.0, av.extent[0], av.extent[1], 0.0, av.speed)
    gx, gy = local(float(goal[0]), float(goal[1]))
    out[1] = (gx, gy, 0.0, 0.0, 0.0, math.hypot(gx, gy))

    def row(v):
        x, y = local(*v.position)
        return (x, y, v.extent[0], v.extent[1], wrap_angle(v.yaw - av.yaw), v.speed)

    if n_nearby == 0:
        return out
    subject = world.vehicle(cbv_id)
    out[2] = row(subject)
    rest = [v for v in world.vehicles if v.id not in (av.id, cbv_id)]
    rest.sort(key=lambda v: (math.hypot(v.position[0] - ax, v.position[1] - ay), v.id))
    for k, v in enumerate(rest[: n_nearby - 1]):
        out[3 + k] = row(v)
    return out


def nearest_vehicle_id(world) -> int | None:
    av = world.av
    best, best_d = None, math.inf
    for v in world.vehicles:
        if v.id == av.id:
            continue
        d = math.hypot(v.position[0] - av.position[0], v.position[1] - av.position[1])
        if d < best_d or (d == best_d and v.id < best):
            best, best_d = v.id, d
    return best
