"""SVG figures: TTC/PET and severity distributions, LFR level sets, training curves."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# stable element ids and no timestamp, so reruns give identical files
plt.rcParams["svg.hashsalt"] = "frealab"
_META = {"Date": None}


def _save(fig, path) -> None:
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata=_META)
    plt.close(fig)


def surrogate_histograms(path, reports_by_mode: dict, ttc_bins, pet_bins) -> None:
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.4))
    for mode in sorted(reports_by_mode):
        reps = reports_by_mode[mode]
        ttc = [t for r in reps for t in r.min_ttc]
        pet = [p for r in reps for p in r.pet]
        axes[0].hist(ttc, bins=ttc_bins, histtype="step", label=mode)
        axes[1].hist(pet, bins=pet_bins, histtype="step", label=mode)
    axes[0].set_xlabel("minimum TTC per near-miss event [s]")
    axes[1].set_xlabel("PET per AV conflict [s]")
    for ax in axes:
        ax.set_ylabel("count")
        ax.legend(fontsize=8)
    _save(fig, path)


def severity_histogram(path, reports_by_mode: dict) -> None:
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.4))
    for mode in sorted(reports_by_mode):
        sev = [s for r in reports_by_mode[mode] for s in r.severities]
        if not sev:
            continue
        axes[0].hist([s["relative_speed"] for s in sev], bins=np.arange(0, 21, 2), histtype="step", label=mode)
        axes[1].hist([s["impulse_proxy"] for s in sev], bins=np.linspace(0, 12000, 13), histtype="step", label=mode)
    axes[0].set_xlabel("collision relative speed [m/s]")
    axes[1].set_xlabel("impulse proxy [kg m/s]")
    for ax in axes:
        ax.set_ylabel("count")
        if ax.get_legend_handles_labels()[0]:
            ax.legend(fontsize=8)
    _save(fig, path)


def level_sets(path, grid, speeds) -> None:
    """V_h = 0 contours over (gap, hazard speed) at several AV speeds."""
    names = [a.name for a in grid.axes]
    gap, av, hz = (names.index(n) for n in ("gap", "av_speed", "hazard_speed"))
    fig, ax = plt.subplots(figsize=(5, 4))
    x = grid.axes[gap].nodes
    y = grid.axes[hz].nodes
    cmap = plt.get_cmap("viridis")
    for k, v in enumerate(speeds):
        i = int(np.argmin(np.abs(grid.axes[av].nodes - v)))
        sl = np.take(grid.values, i, axis=av)
        sl = sl if gap < hz else sl.T
        color = cmap(k / max(len(speeds) - 1, 1))
        ax.contour(x, y, sl.T, levels=[0.0], colors=[color])
        ax.plot([], [], color=color, label=f"AV speed {grid.axes[av].nodes[i]:g} m/s")
    ax.set_xlabel("gap [m]")
    ax.set_ylabel("hazard speed [m/s]")
    ax.set_title("boundary of the feasible region")
    ax.legend(fontsize=8)
    _save(fig, path)


def curves(path, xs, series: dict, xlabel: str = "step", logy: bool = False) -> None:
    fig, axes = plt.subplots(1, len(series), figsize=(3.2 * len(series), 3))
    axes = np.atleast_1d(axes)
    for ax, (name, ys) in zip(axes, series.items()):
        ax.plot(xs, ys, lw=0.8)
        ax.set_title(name)
        ax.set_xlabel(xlabel)
        if logy:
            ax.set_yscale("symlog", linthresh=1e-3)
    _save(fig, path)
