"""Surrogate-safety, feasibility and driving-performance metrics over episode logs.

Logs are lists of step records as written by the trajectory logger; vehicle
rows are ``[id, role, x, y, yaw, speed, half_length, half_width]``.
"""
from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .world.geometry import box_corners, polygon_distance

VEHICLE_MASS = 1500.0
NEAR_MISS_TTC = 3.0
PET_CELL = 0.5
PET_MIN_ANGLE = math.radians(30.0)


@dataclass(frozen=True)
class MetricConfig:
    weights: dict = field(default_factory=lambda: {"CR": 0.4, "OR": 0.1, "RF": 0.1, "UC": 0.3, "TS": 0.1})
    maxima: dict = field(default_factory=lambda: {"CR": 1.0, "OR": 10.0, "RF": 5.0, "UC": 1.0, "TS": 30.0})
    near_miss_ttc: float = NEAR_MISS_TTC
    ttc_bins: tuple = (0.0, 0.5, 1.0, 1.5, 2.0, 2.5, 3.0)
    pet_bins: tuple = (0.0, 0.5, 1.0, 1.5, 2.0, 2.5, 3.0, 4.0, 5.0)

    def __post_init__(self):
        if set(self.weights) != set(self.maxima):
            raise ValueError("weights and maxima must name the same metrics")
        if abs(sum(self.weights.values()) - 1.0) > 1e-9:
            raise ValueError("metric weights must sum to 1")
        if any(m <= 0 for m in self.maxima.values()):
            raise ValueError("metric maxima must be positive")


# ------------------------------------------------------------------ formulas

def ttc(distance: float, closing_speed: float) -> float | None:
    """Time to collision; None when the gap is opening or constant."""
    if distance < 0:
        raise ValueError("distance must be non-negative")
    if closing_speed <= 0:
        return None
    return distance / closing_speed


def overall_score(metrics: dict, config: MetricConfig = MetricConfig()) -> float:
    """100 * sum_i w_i * clamp(1 - m_i / max_i, 0, 1); all five metrics are lower-is-better."""
    total = 0.0
    for k, w in config.weights.items():
        g = 1.0 - metrics[k] / config.maxima[k]
        total += w * min(1.0, max(0.0, g))
    return 100.0 * total


def infeasible_ratio(v_h_series, collision: bool) -> float | None:
    v = np.asarray(v_h_series, dtype=float)
    if len(v) == 0:
        raise ValueError("empty V_h series")
    if not collision:
        return None
    return float(np.count_nonzero(v > 0.0)) / len(v)


def severity(v1, v2, p1, p2, m1: float = VEHICLE_MASS, m2: float = VEHICLE_MASS) -> tuple[float, float]:
    """(relative speed, reduced mass x relative speed along the centre line)."""
    vr = np.asarray(v1, dtype=float) - np.asarray(v2, dtype=float)
    rel = float(np.hypot(*vr))
    n = np.asarray(p2, dtype=float) - np.asarray(p1, dtype=float)
    norm = float(np.hypot(*n))
    normal = abs(float(vr @ n) / norm) if norm > 0 else rel
    mu = m1 * m2 / (m1 + m2)
    return rel, mu * normal


# ---------------------------------------------------------------- log access

def _rows(rec: dict) -> dict[int, list]:
    return {int(r[0]): r for r in rec["vehicles"]}


def _av_row(rec: dict) -> list:
    for r in rec["vehicles"]:
        if r[1] == "AV":
            return r
    raise ValueError("record without an AV")


def _velocity(row) -> np.ndarray:
    return np.array([row[5] * math.cos(row[4]), row[5] * math.sin(row[4])])


def _corners(row):
    return box_corners(row[2], row[3], row[4], row[6], row[7])


def bbox_distance_rows(a, b) -> float:
    return polygon_distance(_corners(a), _corners(b))


def infeasible_distance(records: list[dict]) -> float | None:
    """AV-CBV box distance at the first step whose V_h is positive (nearest other vehicle if no CBV is active)."""
    for rec in records:
        v = rec.get("v_h")
        if v is None or not v > 0.0:
            continue
        if rec.get("cbv_av_dist") is not None:
            return float(rec["cbv_av_dist"])
        av = _av_row(rec)
        others = [r for r in rec["vehicles"] if r[1] != "AV"]
        return min((bbox_distance_rows(av, o) for o in others), default=None)
    return None


TTC_HORIZON = 6.0
TTC_DT = 0.02


def _obb_axes(yaw):
    c, s = np.cos(yaw), np.sin(yaw)
    return np.stack([np.stack([c, s], -1), np.stack([-s, c], -1)], -2)


def boxes_overlap(ca, ya, ea, cb, yb, eb) -> np.ndarray:
    """Separating-axis overlap test, vectorized over leading axis of the centres."""
    ax_a, ax_b = _obb_axes(ya), _obb_axes(yb)
    d = cb - ca
    hit = np.ones(len(d), dtype=bool)
    for axes in (ax_a, ax_b):
        for k in range(2):
            n = axes[k]
            ra = ea[0] * abs(ax_a[0] @ n) + ea[1] * abs(ax_a[1] @ n)
            rb = eb[0] * abs(ax_b[0] @ n) + eb[1] * abs(ax_b[1] @ n)
            hit &= np.abs(d @ n) <= ra + rb
    return hit


def extrapolated_ttc(a, b, horizon: float = TTC_HORIZON, dt: float = TTC_DT) -> float | None:
    """First time two vehicle rows touch when both keep their current velocity; None within ``horizon``."""
    if bbox_distance_rows(a, b) <= 0.0:
        return 0.0
    t = np.arange(dt, horizon + dt / 2, dt)
    pa = np.array(a[2:4]) + t[:, None] * _velocity(a)
    pb = np.array(b[2:4]) + t[:, None] * _velocity(b)
    hit = boxes_overlap(pa, a[4], (a[6], a[7]), pb, b[4], (b[6], b[7]))
    if not hit.any():
        return None
    i = int(np.argmax(hit))
    lo = 0.0 if i == 0 else t[i - 1]
    # refine the crossing inside the last interval
    for _ in range(20):
        mid = 0.5 * (lo + t[i])
        pam = np.array(a[2:4]) + mid * _velocity(a)
        pbm = np.array(b[2:4]) + mid * _velocity(b)
        if boxes_overlap(pam[None], a[4], (a[6], a[7]), pbm[None], b[4], (b[6], b[7]))[0]:
            t[i] = mid
        else:
            lo = mid
    return float(t[i])


def ttc_series(records: list[dict], radius: float = 40.0) -> list[dict[int, float | None]]:
    """Per step, extrapolated TTC from the AV to each vehicle within ``radius``."""
    out = []
    for rec in records:
        av = _av_row(rec)
        step = {}
        for r in rec["vehicles"]:
            if r[1] == "AV" or math.hypot(r[2] - av[2], r[3] - av[3]) > radius:
                continue
            step[int(r[0])] = extrapolated_ttc(av, r)
        out.append(step)
    return out


def near_miss_events(records: list[dict], threshold: float = NEAR_MISS_TTC) -> list[dict]:
    """Onsets of TTC < threshold per AV-vehicle pair, with the minimum TTC reached during each event."""
    events, open_ev = [], {}
    for rec, step in zip(records, ttc_series(records)):
        below = {vid for vid, t in step.items() if t is not None and t < threshold}
        for vid in below:
            if vid not in open_ev:
                open_ev[vid] = {"t": rec["t"], "id": vid, "min_ttc": step[vid]}
                events.append(open_ev[vid])
            else:
                open_ev[vid]["min_ttc"] = min(open_ev[vid]["min_ttc"], step[vid])
        for vid in list(open_ev):
            if vid not in below:
                del open_ev[vid]
    return events


def _footprint_cells(row, cell: float) -> set[tuple[int, int]]:
    hl, hw = row[6], row[7]
    xs = np.arange(-hl, hl + 1e-9, cell / 2) if hl > cell / 4 else np.array([0.0])
    ys = np.arange(-hw, hw + 1e-9, cell / 2) if hw > cell / 4 else np.array([0.0])
    gx, gy = np.meshgrid(xs, ys)
    c, s = math.cos(row[4]), math.sin(row[4])
    wx = row[2] + c * gx - s * gy
    wy = row[3] + s * gx + c * gy
    return set(zip(np.floor(wx / cell).astype(int).ravel().tolist(), np.floor(wy / cell).astype(int).ravel().tolist()))


def pet_events(records: list[dict], cell: float = PET_CELL, min_angle: float = PET_MIN_ANGLE,
               radius: float = 60.0) -> list[dict]:
    """Post-encroachment time for AV-involved crossing conflicts.

    Footprints are rasterized on a ``cell`` grid.  For every cell both the AV
    and another vehicle occupy at some point, PET = (second vehicle's first
    entry) - (first vehicle's last exit), 0 when the occupancies overlap.
    One event per pair, at the cell with the smallest PET; pairs whose
    headings in that cell differ by less than ``min_angle`` (car following)
    are skipped.
    """
    if not records:
        return []
    occ: dict[int, dict[tuple[int, int], list]] = {}
    av_id = int(_av_row(records[0])[0])
    for rec in records:
        av = _av_row(rec)
        for r in rec["vehicles"]:
            vid = int(r[0])
            if vid != av_id and math.hypot(r[2] - av[2], r[3] - av[3]) > radius:
                continue
            cells = occ.setdefault(vid, {})
            for c in _footprint_cells(r, cell):
                slot = cells.get(c)
                if slot is None:
                    cells[c] = [rec["t"], rec["t"], r[4]]
                else:
                    slot[1] = rec["t"]
    if av_id not in occ:
        return []
    av_cells = occ[av_id]
    events = []
    for vid, cells in sorted(occ.items()):
        if vid == av_id:
            continue
        best = None
        for c in av_cells.keys() & cells.keys():
            a, b = av_cells[c], cells[c]
            if abs(math.atan2(math.sin(a[2] - b[2]), math.cos(a[2] - b[2]))) < min_angle:
                continue
            first, second = (a, b) if a[0] <= b[0] else (b, a)
            pet = max(0.0, second[0] - first[1])
            if best is None or pet < best[0]:
                best = (pet, c, first, second)
        if best is not None:
            pet, c, first, second = best
            events.append({"id": vid, "cell": [(c[0] + 0.5) * cell, (c[1] + 0.5) * cell],
                           "t1": first[1], "t2": second[0], "pet": pet})
    return events


def collision_severities(records: list[dict], mass: float = VEHICLE_MASS) -> list[dict]:
    out = []
    for rec in records:
        rows = _rows(rec)
        for e in rec.get("events", []):
            if e.get("type") != "collision":
                continue
            a, b = (rows.get(int(i)) for i in e["ids"])
            if a is None or b is None:
                continue
            rel, imp = severity(_velocity(a), _velocity(b), a[2:4], b[2:4], mass, mass)
            out.append({"t": rec["t"], "ids": list(e["ids"]), "relative_speed": rel, "impulse_proxy": imp,
                        "av_involved": "AV" in (a[1], b[1])})
    return out


# --------------------------------------------------------------- per episode

@dataclass
class ScenarioReport:
    seed: int
    mode: str
    collision: int
    ir: float | None
    id: float | None
    near_misses: int
    min_ttc: list[float]
    pet: list[float]
    severities: list[dict]
    off_road: float
    rf_mean_dev: float
    rf_ratio: float
    completion: float
    time_spent: float | None
    steps: int

    def driving_metrics(self) -> dict:
        return {"CR": float(self.collision), "OR": self.off_road, "RF": self.rf_mean_dev, "UC": 1.0 - self.completion,
                "TS": self.time_spent}


def route_metrics(records: list[dict], lane, dt: float, av_start_s: float | None = None) -> dict:
    """Off-road distance, mean lateral deviation, completion fraction and completion time."""
    s_list, off, devs = [], 0.0, []
    prev = None
    for rec in records:
        av = _av_row(rec)
        s, lat = lane.project(av[2], av[3])
        s_list.append(s)
        devs.append(abs(lat))
        if prev is not None and abs(lat) > lane.width / 2 + av[7]:
            off += math.hypot(av[2] - prev[0], av[3] - prev[1])
        prev = (av[2], av[3])
    if not records:
        return {"off_road": 0.0, "mean_dev": 0.0, "completion": 0.0, "time": None}
    start = s_list[0] if av_start_s is None else av_start_s
    span = max(lane.length - 3.0 - start, 1e-9)
    completion = min(1.0, max(0.0, (max(s_list) - start) / span))
    t_done = None
    if completion >= 1.0 - 1e-9:
        t_done = records[[i for i, s in enumerate(s_list) if s >= lane.length - 3.0 - 1e-9][0]]["t"]
    return {"off_road": off, "mean_dev": float(np.mean(devs)), "completion": completion, "time": t_done}


def evaluate_episode(records: list[dict], lane, dt: float, seed: int = 0, mode: str = "",
                     config: MetricConfig = MetricConfig(), av_start_s: float | None = None) -> ScenarioReport:
    av_id = int(_av_row(records[0])[0]) if records else 0
    collision = int(any(av_id in [int(i) for i in e["ids"]] for r in records for e in r.get("events", [])
                        if e.get("type") == "collision"))
    v_h = [r.get("v_h") for r in records]
    have_vh = records and all(v is not None for v in v_h)
    ir = infeasible_ratio(v_h, bool(collision)) if have_vh else None
    idist = infeasible_distance(records) if (have_vh and collision) else None
    nm = near_miss_events(records, config.near_miss_ttc)
    pets = [e["pet"] for e in pet_events(records)]
    rm = route_metrics(records, lane, dt, av_start_s)
    rf_ratio = 1.0 - min(rm["mean_dev"] / config.maxima["RF"], 1.0)
    return ScenarioReport(seed, mode, collision, ir, idist, len(nm), [e["min_ttc"] for e in nm], pets,
                          [s for s in collision_severities(records) if s["av_involved"]], rm["off_road"],
                          rm["mean_dev"], rf_ratio, rm["completion"], rm["time"], len(records))


# ------------------------------------------------------------------ aggregate

def _mean(xs) -> float | None:
    xs = [x for x in xs if x is not None]
    return float(np.mean(xs)) if xs else None


def aggregate(reports: list[ScenarioReport], config: MetricConfig = MetricConfig()) -> dict:
    """Means over reports (order-independent).  IR and ID average over collision episodes only."""
    if not reports:
        raise ValueError("need at least one report")
    reports = sorted(reports, key=lambda r: (r.mode, r.seed))
    ts = _mean(r.time_spent for r in reports)
    metrics = {
        "CR": _mean(r.collision for r in reports),
        "OR": _mean(r.off_road for r in reports),
        "RF": _mean(r.rf_mean_dev for r in reports),
        "UC": _mean(1.0 - r.completion for r in reports),
        # no completed route: the time metric scores zero
        "TS": ts if ts is not None else config.maxima["TS"],
    }
    out = {
        "episodes": len(reports),
        **metrics,
        "RF_ratio": _mean(r.rf_ratio for r in reports),
        "IR": _mean(r.ir for r in reports if r.collision),
        "ID": _mean(r.id for r in reports if r.collision),
        "near_misses": int(sum(r.near_misses for r in reports)),
        "near_misses_per_episode": _mean(r.near_misses for r in reports),
        "mean_pet": _mean(p for r in reports for p in r.pet),
        "collision_speed": _mean(s["relative_speed"] for r in reports for s in r.severities),
        "impulse_proxy": _mean(s["impulse_proxy"] for r in reports for s in r.severities),
        "TS_completed": ts,
    }
    out["OS"] = overall_score(metrics, config)
    return out


def histogram(values, bins) -> list[int]:
    return np.histogram(np.asarray(list(values), dtype=float), bins=np.asarray(bins, dtype=float))[0].tolist()


SUMMARY_FIELDS = ["mode", "episodes", "CR", "IR", "ID", "near_misses", "near_misses_per_episode", "mean_pet",
                  "collision_speed", "impulse_proxy", "OR", "RF", "RF_ratio", "UC", "TS", "TS_completed", "OS"]


def _cell(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return v


def write_summary_csv(path, summaries: dict[str, dict]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(SUMMARY_FIELDS)
        for mode in sorted(summaries):
            w.writerow([mode] + [_cell(summaries[mode].get(k)) for k in SUMMARY_FIELDS[1:]])


def write_episode_csv(path, reports: list[ScenarioReport]) -> None:
    cols = ["mode", "seed", "collision", "ir", "id", "near_misses", "off_road", "rf_mean_dev", "rf_ratio",
            "completion", "time_spent", "steps"]
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(cols)
        for r in sorted(reports, key=lambda r: (r.mode, r.seed)):
            d = asdict(r)
            w.writerow([_cell(d[c]) for c in cols])


def write_histograms_csv(path, reports_by_mode: dict[str, list[ScenarioReport]], config: MetricConfig = MetricConfig()):
    """Long-format histogram table: metric, mode, bin_lo, bin_hi, count."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["metric", "mode", "bin_lo", "bin_hi", "count"])
        for mode in sorted(reports_by_mode):
            reps = reports_by_mode[mode]
            series = {
                "ttc": ([t for r in reps for t in r.min_ttc], config.ttc_bins),
                "pet": ([p for r in reps for p in r.pet], config.pet_bins),
                "collision_speed": ([s["relative_speed"] for r in reps for s in r.severities], (0, 2, 4, 6, 8, 10, 12, 16, 20)),
            }
            for name, (vals, bins) in series.items():
                for lo, hi, c in zip(bins[:-1], bins[1:], histogram(vals, bins)):
                    w.writerow([name, mode, lo, hi, c])


def read_csv(path) -> list[dict]:
    with open(Path(path), newline="") as f:
        return list(csv.DictReader(f))
