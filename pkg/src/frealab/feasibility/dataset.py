"""Offline transition records, their append-only text format and a coverage report.

File layout: one JSON header line, then one comma-separated record per line::

    source,done,h,h_next,accel,steer,<obs...>,<next_obs...>

Floats are written with ``repr`` so a round trip is exact.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..world.vehicle import Action
from ..world.world import SAFE, VIOLATION
from .offline import OfflineData

SCHEMA = "frealab-dataset"
VERSION = 1
IMBALANCE_FRACTION = 0.01


@dataclass(frozen=True)
class TransitionRecord:
    pseudo_state: np.ndarray
    av_action: Action
    next_pseudo_state: np.ndarray
    h: float
    h_next: float
    done: bool
    source_policy: str

    def __post_init__(self):
        if self.pseudo_state.shape != self.next_pseudo_state.shape:
            raise ValueError("pseudo_state and next_pseudo_state shapes differ")
        for v in (self.h, self.h_next):
            if v not in (SAFE, VIOLATION):
                raise ValueError(f"h values must be {SAFE} or {VIOLATION}, got {v}")
        if "," in self.source_policy or "\n" in self.source_policy:
            raise ValueError("source tag may not contain commas or newlines")


def _header(obs_shape) -> str:
    return json.dumps({"schema": SCHEMA, "version": VERSION, "obs_shape": list(obs_shape),
                       "fields": ["source", "done", "h", "h_next", "accel", "steer", "obs", "next_obs"]})


def _line(r: TransitionRecord) -> str:
    vals = [r.source_policy, "1" if r.done else "0", repr(float(r.h)), repr(float(r.h_next)),
            repr(float(r.av_action.accel)), repr(float(r.av_action.steer))]
    vals += [repr(float(x)) for x in r.pseudo_state.ravel()]
    vals += [repr(float(x)) for x in r.next_pseudo_state.ravel()]
    return ",".join(vals)


class DatasetWriter:
    """Append-only writer; the header is written once when the file is created."""

    def __init__(self, path, obs_shape):
        self.path = Path(path)
        self.obs_shape = tuple(obs_shape)
        if self.path.exists() and self.path.stat().st_size > 0:
            with open(self.path) as f:
                head = json.loads(f.readline())
            if head.get("schema") != SCHEMA or tuple(head["obs_shape"]) != self.obs_shape:
                raise ValueError(f"{path}: existing file has an incompatible header")
            self._f = open(self.path, "a")
        else:
            self._f = open(self.path, "w")
            self._f.write(_header(self.obs_shape) + "\n")
        self.count = 0

    def write(self, record: TransitionRecord) -> None:
        if record.pseudo_state.shape != self.obs_shape:
            raise ValueError(f"record shape {record.pseudo_state.shape} != {self.obs_shape}")
        self._f.write(_line(record) + "\n")
        self.count += 1

    def close(self) -> None:
        self._f.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def write_dataset(path, records: list[TransitionRecord], obs_shape=None) -> None:
    if obs_shape is None:
        if not records:
            raise ValueError("obs_shape required for an empty dataset")
        obs_shape = records[0].pseudo_state.shape
    Path(path).unlink(missing_ok=True)
    with DatasetWriter(path, obs_shape) as w:
        for r in records:
            w.write(r)


def read_dataset(path) -> list[TransitionRecord]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"dataset not found: {path}")
    with open(path) as f:
        head = json.loads(f.readline())
        if head.get("schema") != SCHEMA or head.get("version") != VERSION:
            raise ValueError(f"{path}: unsupported dataset header {head.get('schema')} v{head.get('version')}")
        shape = tuple(head["obs_shape"])
        n_obs = int(np.prod(shape))
        expected = 6 + 2 * n_obs
        out = []
        for lineno, line in enumerate(f, start=2):
            parts = line.rstrip("\n").split(",")
            if len(parts) != expected:
                raise ValueError(f"{path}:{lineno}: expected {expected} fields, got {len(parts)}")
            nums = np.array([float(x) for x in parts[2:]])
            out.append(TransitionRecord(
                nums[4:4 + n_obs].reshape(shape), Action(nums[2], nums[3]), nums[4 + n_obs:].reshape(shape),
                float(nums[0]), float(nums[1]), parts[1] == "1", parts[0]))
    return out


def to_offline_data(records: list[TransitionRecord]) -> OfflineData:
    if not records:
        raise ValueError("empty dataset")
    return OfflineData(
        np.stack([r.pseudo_state.ravel() for r in records]),
        np.array([[r.av_action.accel, r.av_action.steer] for r in records]),
        np.stack([r.next_pseudo_state.ravel() for r in records]),
        np.array([r.h for r in records]),
        np.array([r.h_next for r in records]),
        np.array([r.done for r in records]),
        [r.source_policy for r in records],
    )


def validate_dataset(records: list[TransitionRecord], speed_bins: int = 12, distance_bins: int = 12) -> dict:
    """Coverage report: h histogram, source mix, AV-speed and AV-CBV distance marginals."""
    if not records:
        raise ValueError("empty dataset: nothing to validate")
    n = len(records)
    h = np.array([r.h for r in records])
    n_pos = int(np.sum(h > 0))
    tags, counts = np.unique([r.source_policy for r in records], return_counts=True)
    speed = np.array([r.pseudo_state[0, 5] for r in records])
    # row 2 holds the CBV in the AV frame
    dist = np.array([float(np.hypot(*r.pseudo_state[2, :2])) if r.pseudo_state.shape[0] > 2 else 0.0 for r in records])
    pos_frac = n_pos / n
    sh, se = np.histogram(speed, bins=speed_bins)
    dh, de = np.histogram(dist, bins=distance_bins)
    return {
        "records": n,
        "h_histogram": {str(SAFE): int(np.sum(h == SAFE)), str(VIOLATION): int(np.sum(h == VIOLATION))},
        "positive_fraction": pos_frac,
        "negative_fraction": 1.0 - pos_frac,
        "imbalanced": bool(min(pos_frac, 1.0 - pos_frac) < IMBALANCE_FRACTION),
        "sources": {str(t): int(c) for t, c in zip(tags, counts)},
        "source_fractions": {str(t): float(c) / n for t, c in zip(tags, counts)},
        "av_speed_hist": {"edges": se.tolist(), "counts": sh.tolist()},
        "distance_hist": {"edges": de.tolist(), "counts": dh.tolist()},
    }


def format_report(report: dict) -> str:
    lines = [f"records: {report['records']}",
             f"h histogram: {report['h_histogram']}",
             f"positive (h=M) fraction: {report['positive_fraction']:.4f}" + ("  [IMBALANCED]" if report["imbalanced"] else ""),
             "sources: " + ", ".join(f"{k}={v} ({report['source_fractions'][k]:.3f})" for k, v in report["sources"].items())]
    return "\n".join(lines)
