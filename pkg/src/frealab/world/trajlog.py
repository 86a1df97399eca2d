"""Newline-delimited trajectory logs.

The first line is a header object ``{"schema": "frealab-trajectory", "version": 1, ...}``.
Every following line is one step record with keys in a fixed order:
``t, h, vehicles, events`` plus optional per-step annotations (``v_h``,
``cbvs``).  Vehicles are ``[id, role, x, y, yaw, speed, half_length, half_width]``.
"""
from __future__ import annotations

import json
from pathlib import Path

SCHEMA = "frealab-trajectory"
VERSION = 1
VEHICLE_FIELDS = ["id", "role", "x", "y", "yaw", "speed", "half_length", "half_width"]


def vehicle_row(v) -> list:
    return [v.id, v.role.value, v.position[0], v.position[1], v.yaw, v.speed, v.extent[0], v.extent[1]]


def step_record(world, h: float, events=(), **annotations) -> dict:
    rec = {
        "t": world.time,
        "h": h,
        "vehicles": [vehicle_row(v) for v in sorted(world.vehicles, key=lambda v: v.id)],
        "events": [
            {"type": "collision", "ids": list(e.ids), "relative_speed": e.relative_speed, "contact": list(e.contact)}
            for e in events
        ],
    }
    for key in sorted(annotations):
        rec[key] = annotations[key]
    return rec


def dumps_record(rec: dict) -> str:
    return json.dumps(rec, separators=(",", ":"))


class TrajectoryWriter:
    def __init__(self, path, **meta):
        self._f = open(path, "w")
        header = {"schema": SCHEMA, "version": VERSION, "vehicle_fields": VEHICLE_FIELDS}
        header.update({k: meta[k] for k in sorted(meta)})
        self._f.write(dumps_record(header) + "\n")

    def write(self, rec: dict) -> None:
        self._f.write(dumps_record(rec) + "\n")

    def close(self) -> None:
        self._f.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_log(path) -> tuple[dict, list[dict]]:
    lines = Path(path).read_text().splitlines()
    if not lines:
        raise ValueError(f"{path}: empty trajectory log")
    header = json.loads(lines[0])
    if header.get("schema") != SCHEMA:
        raise ValueError(f"{path}: not a trajectory log")
    if header.get("version") != VERSION:
        raise ValueError(f"{path}: unsupported trajectory log version {header.get('version')}")
    return header, [json.loads(line) for line in lines[1:] if line]
