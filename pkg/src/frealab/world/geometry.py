"""Oriented-rectangle geometry: corners, containment and exact gap distance."""
from __future__ import annotations

import math
from typing import Sequence

Point = tuple[float, float]


def box_corners(x: float, y: float, yaw: float, half_length: float, half_width: float) -> list[Point]:
    """Corners in counter-clockwise order starting front-left."""
    c, s = math.cos(yaw), math.sin(yaw)
    fx, fy = c * half_length, s * half_length
    lx, ly = -s * half_width, c * half_width
    return [
        (x + fx + lx, y + fy + ly),
        (x - fx + lx, y - fy + ly),
        (x - fx - lx, y - fy - ly),
        (x + fx - lx, y + fy - ly),
    ]


def vehicle_corners(v) -> list[Point]:
    return box_corners(v.position[0], v.position[1], v.yaw, v.extent[0], v.extent[1])


def _cross(o: Point, a: Point, b: Point) -> float:
    return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])


def point_in_convex(p: Point, poly: Sequence[Point]) -> bool:
    """Closed containment test for a counter-clockwise convex polygon."""
    n = len(poly)
    for i in range(n):
        if _cross(poly[i], poly[(i + 1) % n], p) < 0.0:
            return False
    return True


def point_segment_distance(p: Point, a: Point, b: Point) -> float:
    abx, aby = b[0] - a[0], b[1] - a[1]
    apx, apy = p[0] - a[0], p[1] - a[1]
    denom = abx * abx + aby * aby
    t = 0.0 if denom == 0.0 else max(0.0, min(1.0, (apx * abx + apy * aby) / denom))
    dx, dy = apx - t * abx, apy - t * aby
    return math.hypot(dx, dy)


def _on_segment(p: Point, a: Point, b: Point) -> bool:
    return min(a[0], b[0]) <= p[0] <= max(a[0], b[0]) and min(a[1], b[1]) <= p[1] <= max(a[1], b[1])


def segments_intersect(a: Point, b: Point, c: Point, d: Point) -> bool:
    d1, d2 = _cross(c, d, a), _cross(c, d, b)
    d3, d4 = _cross(a, b, c), _cross(a, b, d)
    if ((d1 > 0 and d2 < 0) or (d1 < 0 and d2 > 0)) and ((d3 > 0 and d4 < 0) or (d3 < 0 and d4 > 0)):
        return True
    if d1 == 0 and _on_segment(a, c, d):
        return True
    if d2 == 0 and _on_segment(b, c, d):
        return True
    if d3 == 0 and _on_segment(c, a, b):
        return True
    if d4 == 0 and _on_segment(d, a, b):
        return True
    return False


def segment_distance(a: Point, b: Point, c: Point, d: Point) -> float:
    if segments_intersect(a, b, c, d):
        return 0.0
    return min(
        point_segment_distance(a, c, d),
        point_segment_distance(b, c, d),
        point_segment_distance(c, a, b),
        point_segment_distance(d, a, b),
    )


def polygon_distance(pa: Sequence[Point], pb: Sequence[Point]) -> float:
    """Gap between two convex polygons (0 when they touch or overlap)."""
    if any(point_in_convex(p, pb) for p in pa) or any(point_in_convex(p, pa) for p in pb):
        return 0.0
    best = math.inf
    na, nb = len(pa), len(pb)
    for i in range(na):
        a, b = pa[i], pa[(i + 1) % na]
        for j in range(nb):
            dist = segment_distance(a, b, pb[j], pb[(j + 1) % nb])
            if dist == 0.0:
                return 0.0
            best = min(best, dist)
    return best


def min_bbox_distance(a, b) -> float:
    """Euclidean gap between the oriented bounding boxes of two vehicles."""
    return polygon_distance(vehicle_corners(a), vehicle_corners(b))


def circumradius(v) -> float:
    return math.hypot(v.extent[0], v.extent[1])


def center_distance(a, b) -> float:
    return math.hypot(a.position[0] - b.position[0], a.position[1] - b.position[1])


def bbox_distance_lower_bound(a, b) -> float:
    """Cheap lower bound on min_bbox_distance from bounding circles."""
    return max(0.0, center_distance(a, b) - circumradius(a) - circumradius(b))


def contact_point(a, b) -> Point:
    """Representative contact location for two overlapping boxes."""
    ca, cb = vehicle_corners(a), vehicle_corners(b)
    inside = [p for p in ca if point_in_convex(p, cb)] + [p for p in cb if point_in_convex(p, ca)]
    if not inside:
        return (0.5 * (a.position[0] + b.position[0]), 0.5 * (a.position[1] + b.position[1]))
    return (sum(p[0] for p in inside) / len(inside), sum(p[1] for p in inside) / len(inside))
