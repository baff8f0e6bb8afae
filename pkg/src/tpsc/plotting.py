"""Figures for the report commands (simulate, aggregate, check).

Each report command writes its table as CSV and, next to it, a PNG drawn
here. Everything renders off-screen.
"""

from __future__ import annotations

import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

RC = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 150,
}


def figsize(scale: float = 1.0) -> tuple[float, float]:
    width = 6.0 * scale
    return width, width * (math.sqrt(5.0) - 1.0) / 2.0


def new(scale: float = 1.0, nrows: int = 1, ncols: int = 1):
    with plt.rc_context(RC):
        fig, ax = plt.subplots(nrows=nrows, ncols=ncols, figsize=figsize(scale))
    return fig, ax


def save(fig, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with plt.rc_context(RC):
        fig.tight_layout()
        fig.savefig(path)
    plt.close(fig)
    return path


def plot_sweep(rows: list[dict], param: str, path: str | Path) -> Path:
    """Median vs mean aggregation error across a swept simulation parameter."""
    fig, ax = new()
    x = [r[param] for r in rows]
    ax.plot(x, [r["mean_error"] for r in rows], "o-", color="tab:red", label="mean")
    ax.plot(x, [r["median_error"] for r in rows], "s-", color="tab:blue", label="median")
    if param == "corrupt_fraction":
        ax.axvline(0.5, color="0.5", ls="--", lw=0.8)
        ax.text(0.5, ax.get_ylim()[1] * 0.95, " breakdown", color="0.4", va="top", fontsize=8)
    ax.set_xlabel(param.replace("_", " "))
    ax.set_ylabel("|aggregate - truth|")
    if param == "corrupt_bias":
        ax.set_xscale("log")
    ax.legend(frameon=False)
    return save(fig, path)


def plot_aggregate(result, series: dict, path: str | Path) -> Path:
    """Raw sources (faint), the per-grid median, and flagged outlier readings."""
    fig, ax = new()
    for sid, samples in series.items():
        if samples:
            ax.plot([s.timestamp_us / 1e6 for s in samples], [s.value for s in samples],
                    lw=0.6, alpha=0.35, label=str(sid))
    t = [p.timestamp_us / 1e6 for p in result.points]
    ax.plot(t, [p.median for p in result.points], color="k", lw=1.4, label="median")
    flagged = [(p.timestamp_us / 1e6, p.median) for p in result.points if p.outlier_source_ids]
    if flagged:
        ax.plot(*zip(*flagged), "x", color="tab:red", ms=4, label="outlier present")
    ax.set_xlabel("time [s since epoch]")
    ax.set_ylabel("value")
    if len(series) <= 8:
        ax.legend(frameon=False, ncol=2)
    return save(fig, path)


def plot_series_checks(by_sensor: dict, reports: dict, path: str | Path) -> Path:
    """One panel per sensor with its series; title carries the violation counts."""
    n = max(len(by_sensor), 1)
    fig, axes = new(scale=1.0, nrows=n, ncols=1)
    fig.set_size_inches(6.0, 1.8 * n + 0.6)
    axes = [axes] if n == 1 else list(axes)
    for ax, (sid, samples) in zip(axes, sorted(by_sensor.items())):
        rep = reports[sid]
        ax.plot([s.timestamp_us / 1e6 for s in samples], [s.value for s in samples], lw=0.8)
        sus = [(s.timestamp_us / 1e6, s.value) for s in samples if s.suspect]
        if sus:
            ax.plot(*zip(*sus), ".", color="tab:orange", ms=3)
        ax.set_title(
            f"sensor {sid}: gaps {rep.sampling_gaps}, range {rep.range_violations}, "
            f"rate {rep.rate_of_change_violations}", loc="left")
    axes[-1].set_xlabel("time [s since epoch]")
    return save(fig, path)
