import math

import numpy as np
import pytest

from frealab.world import Role, VehicleState, WorldState, straight_road


@pytest.fixture
def road():
    return straight_road()


def make_world(layout, others=(), av=(50.0, 0.0, 0.0, 5.0), dt=0.1):
    """AV at ``av`` = (x, y, yaw, speed) on lane 0 plus ``others`` = [(id, x, y, yaw, speed, role)]."""
    x, y, yaw, v = av
    vehicles = [VehicleState(0, (x, y), yaw, v, role=Role.AV, lane=0)]
    for vid, ox, oy, oyaw, ov, role in others:
        vehicles.append(VehicleState(vid, (ox, oy), oyaw, ov, role=role, lane=0 if abs(oy) < 1.75 else 1))
    return WorldState(0.0, dt, tuple(vehicles), layout, 0, 0, 100)


def rel_err(a, b):
    return np.abs(a - b) / np.maximum(1e-8, np.abs(a) + np.abs(b))


ANGLE = math.pi


# one line per acceptance criterion, echoed after the run
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])
