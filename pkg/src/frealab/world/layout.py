"""Road layouts: lane centerlines, spawn slots, conflict points.

Layouts round-trip through a plain-text ``key = value`` file::

    # frealab-layout v1
    name = straight
    box = -10,-10,10,10            (optional intersection box)
    av_lanes = 0
    lane.0.name = east_0
    lane.0.width = 3.5
    lane.0.points = 0,0; 300,0
    spawn.0 = 0,0,0,0              (x, y, yaw, lane index)
    conflict.0 = 1.75,-1.75

Blank lines and ``#`` comments are ignored; unknown keys are rejected.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

LAYOUT_HEADER = "# frealab-layout v1"


@dataclass(frozen=True)
class Pose:
    x: float
    y: float
    yaw: float
    lane: int


class Lane:
    """A centerline polyline with arc-length lookup."""

    def __init__(self, points, width: float, name: str = ""):
        pts = np.asarray(points, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) < 2:
            raise ValueError(f"lane {name!r} needs at least two 2-D points")
        if not width > 0:
            raise ValueError(f"lane {name!r} width must be positive")
        self.points = pts
        self.width = float(width)
        self.name = name
        seg = np.diff(pts, axis=0)
        self._seg = seg
        self._seg_len = np.hypot(seg[:, 0], seg[:, 1])
        if np.any(self._seg_len <= 0):
            raise ValueError(f"lane {name!r} has repeated points")
        self._cum = np.concatenate([[0.0], np.cumsum(self._seg_len)])
        self.length = float(self._cum[-1])
        # intersection box entry/exit arc lengths, filled by the layout
        self.box_entry: float | None = None
        self.box_exit: float | None = None

    def point_at(self, s: float) -> np.ndarray:
        s = min(max(s, 0.0), self.length)
        i = min(int(np.searchsorted(self._cum, s, side="right")) - 1, len(self._seg) - 1)
        t = (s - self._cum[i]) / self._seg_len[i]
        return self.points[i] + t * self._seg[i]

    def points_at(self, s: np.ndarray) -> np.ndarray:
        s = np.clip(s, 0.0, self.length)
        i = np.minimum(np.searchsorted(self._cum, s, side="right") - 1, len(self._seg) - 1)
        t = (s - self._cum[i]) / self._seg_len[i]
        return self.points[i] + t[:, None] * self._seg[i]

    def heading_at(self, s: float) -> float:
        s = min(max(s, 0.0), self.length)
        i = min(int(np.searchsorted(self._cum, s, side="right")) - 1, len(self._seg) - 1)
        return math.atan2(self._seg[i, 1], self._seg[i, 0])

    def project(self, x: float, y: float) -> tuple[float, float]:
        """Return (arc length, signed lateral offset; left positive) of the closest point."""
        p = np.array([x, y])
        ap = p - self.points[:-1]
        t = np.clip(np.einsum("ij,ij->i", ap, self._seg) / self._seg_len**2, 0.0, 1.0)
        closest = self.points[:-1] + t[:, None] * self._seg
        d = np.hypot(*(p - closest).T)
        i = int(np.argmin(d))
        cross = self._seg[i, 0] * ap[i, 1] - self._seg[i, 1] * ap[i, 0]
        lat = d[i] if cross >= 0 else -d[i]
        return float(self._cum[i] + t[i] * self._seg_len[i]), float(lat)


@dataclass
class RoadLayout:
    name: str
    lanes: list[Lane]
    conflict_points: list[tuple[float, float]] = field(default_factory=list)
    spawn_slots: list[Pose] = field(default_factory=list)
    box: tuple[float, float, float, float] | None = None
    av_lanes: list[int] = field(default_factory=list)

    def __post_init__(self):
        if not self.lanes:
            raise ValueError("layout needs at least one lane")
        self._assign_box()
        self.conflicts = self._lane_conflicts()

    def _assign_box(self):
        for lane in self.lanes:
            lane.box_entry = lane.box_exit = None
        if self.box is None:
            return
        x0, y0, x1, y1 = self.box
        for lane in self.lanes:
            s = np.arange(0.0, lane.length, 0.25)
            p = lane.points_at(s)
            inside = (p[:, 0] > x0) & (p[:, 0] < x1) & (p[:, 1] > y0) & (p[:, 1] < y1)
            if inside.any():
                idx = np.flatnonzero(inside)
                lane.box_entry = float(s[idx[0]])
                lane.box_exit = float(min(lane.length, s[idx[-1]] + 0.25))

    def _lane_conflicts(self, threshold: float = 3.0) -> np.ndarray:
        """conflicts[i, j] is True when lanes i and j cross or merge inside the box."""
        n = len(self.lanes)
        out = np.zeros((n, n), dtype=bool)
        if self.box is None:
            return out
        samples = []
        for lane in self.lanes:
            if lane.box_entry is None:
                samples.append(None)
                continue
            s = np.arange(lane.box_entry, lane.box_exit, 0.5)
            samples.append(lane.points_at(s))
        for i in range(n):
            for j in range(i + 1, n):
                a, b = samples[i], samples[j]
                if a is None or b is None:
                    continue
                # lanes from the same approach share an entry and are handled by car following
                if np.allclose(self.lanes[i].points[0], self.lanes[j].points[0]):
                    continue
                d = np.hypot(a[:, None, 0] - b[None, :, 0], a[:, None, 1] - b[None, :, 1])
                if d.min() < threshold:
                    out[i, j] = out[j, i] = True
        return out

    def nearest_lane(self, x: float, y: float, yaw: float, candidates=None) -> int:
        """Lane minimizing lateral offset with a heading-mismatch penalty."""
        best, best_cost = 0, math.inf
        for i in (range(len(self.lanes)) if candidates is None else candidates):
            lane = self.lanes[i]
            s, lat = lane.project(x, y)
            dyaw = abs(math.remainder(yaw - lane.heading_at(s), 2 * math.pi))
            cost = abs(lat) + 4.0 * dyaw + (5.0 if s >= lane.length - 1.0 else 0.0)
            if cost < best_cost:
                best, best_cost = i, cost
        return best

    # ------------------------------------------------------------------ io
    def to_text(self) -> str:
        lines = [LAYOUT_HEADER, f"name = {self.name}"]
        if self.box is not None:
            lines.append("box = " + ",".join(repr(float(v)) for v in self.box))
        if self.av_lanes:
            lines.append("av_lanes = " + ",".join(str(i) for i in self.av_lanes))
        for i, lane in enumerate(self.lanes):
            lines.append(f"lane.{i}.name = {lane.name}")
            lines.append(f"lane.{i}.width = {lane.width!r}")
            pts = "; ".join(f"{x!r},{y!r}" for x, y in lane.points.tolist())
            lines.append(f"lane.{i}.points = {pts}")
        for i, p in enumerate(self.spawn_slots):
            lines.append(f"spawn.{i} = {p.x!r},{p.y!r},{p.yaw!r},{p.lane}")
        for i, (x, y) in enumerate(self.conflict_points):
            lines.append(f"conflict.{i} = {x!r},{y!r}")
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.to_text())

    @classmethod
    def from_text(cls, text: str) -> "RoadLayout":
        lines = text.splitlines()
        if not lines or lines[0].strip() != LAYOUT_HEADER:
            raise ValueError(f"layout file must start with {LAYOUT_HEADER!r}")
        name, box, av_lanes = "layout", None, []
        lanes: dict[int, dict] = {}
        spawns: dict[int, Pose] = {}
        conflicts: dict[int, tuple[float, float]] = {}
        for lineno, raw in enumerate(lines[1:], start=2):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"line {lineno}: expected 'key = value'")
            key, value = (part.strip() for part in line.split("=", 1))
            parts = key.split(".")
            try:
                if key == "name":
                    name = value
                elif key == "box":
                    box = tuple(float(v) for v in value.split(","))
                    if len(box) != 4:
                        raise ValueError("box needs 4 numbers")
                elif key == "av_lanes":
                    av_lanes = [int(v) for v in value.split(",") if v.strip()]
                elif parts[0] == "lane" and len(parts) == 3 and parts[2] in ("name", "width", "points"):
                    entry = lanes.setdefault(int(parts[1]), {})
                    if parts[2] == "points":
                        entry["points"] = [tuple(float(c) for c in pt.split(",")) for pt in value.split(";")]
                    elif parts[2] == "width":
                        entry["width"] = float(value)
                    else:
                        entry["name"] = value
                elif parts[0] == "spawn" and len(parts) == 2:
                    x, y, yaw, lane = value.split(",")
                    spawns[int(parts[1])] = Pose(float(x), float(y), float(yaw), int(lane))
                elif parts[0] == "conflict" and len(parts) == 2:
                    x, y = value.split(",")
                    conflicts[int(parts[1])] = (float(x), float(y))
                else:
                    raise ValueError(f"unknown key {key!r}")
            except ValueError as exc:
                raise ValueError(f"line {lineno}: {exc}") from None
        if sorted(lanes) != list(range(len(lanes))):
            raise ValueError("lane indices must be contiguous from 0")
        lane_objs = []
        for i in range(len(lanes)):
            entry = lanes[i]
            if "points" not in entry or "width" not in entry:
                raise ValueError(f"lane {i} needs points and width")
            lane_objs.append(Lane(entry["points"], entry["width"], entry.get("name", f"lane{i}")))
        return cls(
            name=name,
            lanes=lane_objs,
            conflict_points=[conflicts[k] for k in sorted(conflicts)],
            spawn_slots=[spawns[k] for k in sorted(spawns)],
            box=box,
            av_lanes=av_lanes,
        )

    @classmethod
    def load(cls, path) -> "RoadLayout":
        return cls.from_text(Path(path).read_text())


# ---------------------------------------------------------------- builtins

def straight_road(length: float = 300.0, n_lanes: int = 2, lane_width: float = 3.5) -> RoadLayout:
    """Same-direction multi-lane road along +x; lane 0 is the rightmost."""
    lanes = [
        Lane([(0.0, i * lane_width), (length / 2, i * lane_width), (length, i * lane_width)], lane_width, f"east_{i}")
        for i in range(n_lanes)
    ]
    spawns = [Pose(0.0, i * lane_width, 0.0, i) for i in range(n_lanes)]
    return RoadLayout("straight", lanes, [], spawns, None, [0])


def _arc(center, radius, a0, a1, step=0.5):
    n = max(4, int(abs(a1 - a0) * radius / step))
    angles = np.linspace(a0, a1, n + 1)
    return [(center[0] + radius * math.cos(a), center[1] + radius * math.sin(a)) for a in angles]


def four_way_intersection(arm_length: float = 60.0, lane_width: float = 3.5, box_half: float = 10.0) -> RoadLayout:
    """Four single-lane-per-direction arms meeting at the origin, right-hand traffic.

    Every lane is a complete route: approach, manoeuvre inside the box
    (through, left or right), exit.  Lanes 0-2 start on the south arm.
    """
    w2 = lane_width / 2
    R = box_half
    L = arm_length + R
    # routes for the south arm (heading north), rotated for the other arms
    base = {
        "through": [(w2, -L), (w2, -R), (w2, R), (w2, L)],
        "left": [(w2, -L), (w2, -R)] + _arc((-R, -R), R + w2, 0.0, math.pi / 2)[1:-1] + [(-R, w2), (-L, w2)],
        "right": [(w2, -L), (w2, -R)] + _arc((R, -R), R - w2, math.pi, math.pi / 2)[1:-1] + [(R, -w2), (L, -w2)],
    }
    lanes, spawns = [], []
    for k, arm in enumerate(["S", "E", "N", "W"]):
        ang = k * math.pi / 2
        c, s = math.cos(ang), math.sin(ang)
        for kind in ("through", "left", "right"):
            pts = [(round(c * x - s * y, 9), round(s * x + c * y, 9)) for x, y in base[kind]]
            lanes.append(Lane(pts, lane_width, f"{arm}_{kind}"))
        x0, y0 = lanes[-1].points[0]
        spawns.append(Pose(float(x0), float(y0), math.pi / 2 + ang, len(lanes) - 3))
    layout = RoadLayout("intersection", lanes, [], spawns, (-R, -R, R, R), [0, 1, 2])
    pts = []
    for i in range(len(lanes)):
        for j in range(i + 1, len(lanes)):
            if layout.conflicts[i, j]:
                pts.append(_closest_pair_midpoint(lanes[i], lanes[j], layout.box))
    layout.conflict_points = sorted(set(pts))
    return layout


def _closest_pair_midpoint(a: Lane, b: Lane, box) -> tuple[float, float]:
    sa = a.points_at(np.arange(a.box_entry, a.box_exit, 0.25))
    sb = b.points_at(np.arange(b.box_entry, b.box_exit, 0.25))
    d = np.hypot(sa[:, None, 0] - sb[None, :, 0], sa[:, None, 1] - sb[None, :, 1])
    i, j = np.unravel_index(np.argmin(d), d.shape)
    m = 0.5 * (sa[i] + sb[j])
    return (round(float(m[0]), 2), round(float(m[1]), 2))


BUILTIN_LAYOUTS = {"straight": straight_road, "intersection": four_way_intersection}


def get_layout(name_or_path: str) -> RoadLayout:
    if name_or_path in BUILTIN_LAYOUTS:
        return BUILTIN_LAYOUTS[name_or_path]()
    return RoadLayout.load(name_or_path)
