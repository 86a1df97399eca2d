"""Exact feasible-value iteration on a rectilinear grid.

The backup is

    V(s) = min_a  h(s) + gamma * (max(h(s), V(f(s, a))) - h(s))

which equals ``(1-gamma) h + gamma max(h, V')`` but is written so that
``V >= h`` holds exactly in floating point.  ``gamma = 1`` gives the
undiscounted reachability value ``min_pi max_t h(s_t)``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from ..world.world import D_TH, SAFE, VIOLATION

GRID_SCHEMA = "frealab-grid"
GRID_VERSION = 1


class ConvergenceError(RuntimeError):
    def __init__(self, residual: float, iterations: int):
        super().__init__(f"value iteration did not converge: residual {residual:.3e} after {iterations} sweeps")
        self.residual = residual
        self.iterations = iterations


@dataclass(frozen=True)
class Axis:
    name: str
    lo: float
    hi: float
    n: int

    def __post_init__(self):
        if self.n < 2 or not self.hi > self.lo:
            raise ValueError(f"axis {self.name}: need n >= 2 and hi > lo")

    @property
    def nodes(self) -> np.ndarray:
        return np.linspace(self.lo, self.hi, self.n)

    @property
    def step(self) -> float:
        return (self.hi - self.lo) / (self.n - 1)


@dataclass
class FeasibleValueGrid:
    axes: list[Axis]
    values: np.ndarray
    gamma: float
    action_set: list[float]
    iteration_residual: float
    residuals: list[float] = field(default_factory=list)
    h: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(a.n for a in self.axes)

    def points(self) -> np.ndarray:
        mesh = np.meshgrid(*(a.nodes for a in self.axes), indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)

    def interpolate(self, pts: np.ndarray) -> np.ndarray:
        idx, w = _interp_weights(self.axes, np.atleast_2d(pts))
        return (self.values.ravel()[idx] * w).sum(axis=1)

    def feasible(self) -> np.ndarray:
        return self.values <= 0.0

    # -------------------------------------------------------------- export
    def save(self, path) -> None:
        """Versioned ``.npz``: JSON header with axes metadata, row-major values."""
        header = {
            "schema": GRID_SCHEMA, "version": GRID_VERSION,
            "axes": [[a.name, a.lo, a.hi, a.n] for a in self.axes],
            "gamma": self.gamma, "action_set": list(self.action_set),
            "iteration_residual": self.iteration_residual, "order": "C",
        }
        arrays = {"values": np.ascontiguousarray(self.values), "residuals": np.array(self.residuals)}
        if self.h is not None:
            arrays["h"] = self.h
        arrays["__header__"] = np.frombuffer(json.dumps(header).encode(), dtype=np.uint8)
        with open(path, "wb") as f:
            np.savez(f, **arrays)

    @classmethod
    def load(cls, path) -> "FeasibleValueGrid":
        with np.load(Path(path)) as data:
            header = json.loads(bytes(data["__header__"]).decode())
            if header.get("schema") != GRID_SCHEMA or header.get("version") != GRID_VERSION:
                raise ValueError(f"{path}: not a version-{GRID_VERSION} grid file")
            axes = [Axis(n, lo, hi, k) for n, lo, hi, k in header["axes"]]
            return cls(axes, np.array(data["values"]), header["gamma"], header["action_set"],
                       header["iteration_residual"], list(data["residuals"]),
                       np.array(data["h"]) if "h" in data.files else None)

    def slice_csv(self, path, fixed: dict[str, float]) -> None:
        """Write a 2-D slice (the two free axes) as ``x,y,value`` rows."""
        free = [i for i, a in enumerate(self.axes) if a.name not in fixed]
        if len(free) != 2:
            raise ValueError("fix all but two axes")
        index = []
        for i, a in enumerate(self.axes):
            if a.name in fixed:
                index.append(int(np.argmin(np.abs(a.nodes - fixed[a.name]))))
            else:
                index.append(slice(None))
        sl = self.values[tuple(index)]
        ax, ay = self.axes[free[0]], self.axes[free[1]]
        with open(path, "w") as f:
            f.write(f"{ax.name},{ay.name},value\n")
            for i, x in enumerate(ax.nodes):
                for j, y in enumerate(ay.nodes):
                    f.write(f"{x!r},{y!r},{sl[i, j]!r}\n")


def _interp_weights(axes: list[Axis], pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Flat corner indices and multilinear weights for each point (clamped to the grid)."""
    d = len(axes)
    lo_idx, frac = [], []
    for k, a in enumerate(axes):
        u = (np.clip(pts[:, k], a.lo, a.hi) - a.lo) / a.step
        i = np.minimum(np.floor(u).astype(np.int64), a.n - 2)
        t = u - i
        # snap round-off so exact-grid successors hit a single node
        t = np.where(np.abs(t) < 1e-9, 0.0, np.where(np.abs(t - 1.0) < 1e-9, 1.0, t))
        lo_idx.append(i)
        frac.append(t)
    strides = np.cumprod([1] + [a.n for a in axes[::-1]][:-1])[::-1]
    n = pts.shape[0]
    idx = np.zeros((n, 2**d), dtype=np.int64)
    w = np.ones((n, 2**d))
    for c in range(2**d):
        for k in range(d):
            bit = (c >> (d - 1 - k)) & 1
            idx[:, c] += (lo_idx[k] + bit) * strides[k]
            w[:, c] *= frac[k] if bit else 1.0 - frac[k]
    return idx, w


def on_grid(axes: list[Axis], pts: np.ndarray, tol: float = 1e-9) -> np.ndarray:
    ok = np.ones(len(pts), dtype=bool)
    for k, a in enumerate(axes):
        u = (pts[:, k] - a.lo) / a.step
        ok &= np.abs(u - np.round(u)) < tol
        ok &= (pts[:, k] >= a.lo - tol) & (pts[:, k] <= a.hi + tol)
    return ok


def _solve(axes, h_fn, dynamics, gamma, action_set, tol, max_iter) -> FeasibleValueGrid:
    shape = tuple(a.n for a in axes)
    mesh = np.meshgrid(*(a.nodes for a in axes), indexing="ij")
    pts = np.stack([m.ravel() for m in mesh], axis=1)
    h = np.asarray(h_fn(pts), dtype=float)
    interp = [_interp_weights(axes, dynamics(pts, a)) for a in action_set]
    v = h.copy()
    residuals = []
    for it in range(max_iter):
        best = None
        for idx, w in interp:
            succ = (v[idx] * w).sum(axis=1)
            q = h + gamma * (np.maximum(h, succ) - h)
            best = q if best is None else np.minimum(best, q)
        res = float(np.max(np.abs(best - v)))
        residuals.append(res)
        v = best
        if res <= tol:
            return FeasibleValueGrid(list(axes), v.reshape(shape), gamma, list(action_set), res, residuals, h.reshape(shape))
    raise ConvergenceError(residuals[-1], max_iter)


def grid_value_iteration(axes, h_fn: Callable, dynamics: Callable, gamma: float = 0.98,
                         action_set=(-3.0, 0.0, 3.0), tol: float = 1e-6, max_iter: int = 10_000) -> FeasibleValueGrid:
    """Discounted feasible value function on the grid (Jacobi sweeps from V = h)."""
    if not 0.0 < gamma < 1.0:
        raise ValueError("gamma must lie in (0, 1)")
    return _solve(list(axes), h_fn, dynamics, gamma, list(action_set), tol, max_iter)


def reachability_value_iteration(axes, h_fn: Callable, dynamics: Callable, action_set=(-3.0, 0.0, 3.0),
                                 tol: float = 1e-9, max_iter: int = 10_000) -> FeasibleValueGrid:
    """Undiscounted value ``min_pi max_t h(s_t)`` (the gamma = 1 fixed point)."""
    return _solve(list(axes), h_fn, dynamics, 1.0, list(action_set), tol, max_iter)


def lfr_membership(v_value) -> bool | np.ndarray:
    """Inside the largest feasible region iff the value is not above zero."""
    if np.ndim(v_value) == 0:
        return bool(v_value <= 0.0)
    return np.asarray(v_value) <= 0.0


def one_step_q(grid: FeasibleValueGrid, h_fn, dynamics) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Q(s, a) by one backup of the converged grid.

    Returns (q, v_next, h_next, exact) arrays of shape (cells, actions);
    ``exact`` marks successors that land on grid nodes.
    """
    pts = grid.points()
    h = np.asarray(h_fn(pts), dtype=float)
    q, vn, hn, ex = [], [], [], []
    for a in grid.action_set:
        succ = dynamics(pts, a)
        v_next = grid.interpolate(succ)
        q.append(h + grid.gamma * (np.maximum(h, v_next) - h))
        vn.append(v_next)
        hn.append(np.asarray(h_fn(succ), dtype=float))
        ex.append(on_grid(grid.axes, succ))
    return np.stack(q, 1), np.stack(vn, 1), np.stack(hn, 1), np.stack(ex, 1)


def q_from_next(h_s, h_next, v_s, v_next, form: str = "next"):
    """Q* from current/next states.

    ``form="next"`` uses V(s') when h(s') >= h(s); ``form="current"`` uses
    V(s) in that branch.  The second branch is max(h(s), V(s')) in both.
    """
    if form not in ("next", "current"):
        raise ValueError(f"unknown form {form!r}")
    h_s, h_next, v_s, v_next = np.broadcast_arrays(*(np.asarray(x, dtype=float) for x in (h_s, h_next, v_s, v_next)))
    first = v_next if form == "next" else v_s
    return np.where(h_next >= h_s, first, np.maximum(h_s, v_next))


# ------------------------------------------------------ longitudinal instance

@dataclass(frozen=True)
class LongitudinalInstance:
    """AV closing on a hazard ahead: state (gap, av_speed[, hazard_speed]).

    The hazard keeps its speed; the AV picks an acceleration each step.
    ``h`` follows the sparse violation rule on the bumper gap.
    """
    gap_max: float = 40.0
    gap_step: float = 0.1
    speed_max: float = 12.0
    speed_step: float = 0.5
    hazard_speeds: tuple[float, float, int] | None = (0.0, 12.0, 13)
    dt: float = 0.5
    d_th: float = D_TH
    m: float = VIOLATION
    action_set: tuple[float, ...] = (-3.0, 0.0, 3.0)

    @property
    def axes(self) -> list[Axis]:
        axes = [
            Axis("gap", 0.0, self.gap_max, int(round(self.gap_max / self.gap_step)) + 1),
            Axis("av_speed", 0.0, self.speed_max, int(round(self.speed_max / self.speed_step)) + 1),
        ]
        if self.hazard_speeds is not None:
            lo, hi, n = self.hazard_speeds
            axes.append(Axis("hazard_speed", lo, hi, n))
        return axes

    def h(self, pts: np.ndarray) -> np.ndarray:
        return np.where(pts[:, 0] <= self.d_th, self.m, SAFE)

    def dynamics(self, pts: np.ndarray, accel: float) -> np.ndarray:
        gap, v = pts[:, 0], pts[:, 1]
        vh = pts[:, 2] if pts.shape[1] > 2 else 0.0
        v1 = np.clip(v + accel * self.dt, 0.0, self.speed_max)
        gap1 = np.clip(gap + (vh - 0.5 * (v + v1)) * self.dt, 0.0, self.gap_max)
        out = pts.copy()
        out[:, 0] = gap1
        out[:, 1] = v1
        return out

    def solve(self, gamma: float = 0.98, tol: float = 1e-6, max_iter: int = 10_000) -> FeasibleValueGrid:
        return grid_value_iteration(self.axes, self.h, self.dynamics, gamma, self.action_set, tol, max_iter)

    def solve_reachability(self, tol: float = 1e-9, max_iter: int = 10_000) -> FeasibleValueGrid:
        return reachability_value_iteration(self.axes, self.h, self.dynamics, self.action_set, tol, max_iter)


def infeasible_counts_by_speed(grid: FeasibleValueGrid, speed_axis: int = 1) -> np.ndarray:
    infeasible = grid.values > 0.0
    other = tuple(i for i in range(infeasible.ndim) if i != speed_axis)
    return infeasible.sum(axis=other)
