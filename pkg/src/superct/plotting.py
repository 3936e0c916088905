"""Figures written straight to files (Agg backend, no display needed)."""

from __future__ import annotations

from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

DISPLAY_WINDOW = (800.0, 1200.0)


def window_image(image, window=DISPLAY_WINDOW):
    """Map HU to [0, 1] with the window edges at 0 and 1; values outside are clipped."""
    lo, hi = window
    if not hi > lo:
        raise ValueError("window upper edge must exceed lower edge")
    return np.clip((np.asarray(image, dtype=np.float64) - lo) / (hi - lo), 0.0, 1.0)


def save_png(path, image, window=DISPLAY_WINDOW):
    """8-bit grayscale PNG, ``window[0]`` -> 0 and ``window[1]`` -> 255."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    plt.imsave(path, window_image(image, window), cmap="gray", vmin=0.0, vmax=1.0)
    return path


def _finish(fig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def metric_boxplot(rows, metric, path):
    """Box plot of one metric per method from metrics-CSV style rows."""
    groups = defaultdict(list)
    for r in rows:
        v = float(r.get(metric, "nan"))
        if np.isfinite(v):
            groups[r["method"]].append(v)
    methods = sorted(groups)
    fig, ax = plt.subplots(figsize=(1.4 * max(len(methods), 2) + 1, 3.5))
    ax.boxplot([groups[m] for m in methods])
    ax.set_xticks(range(1, len(methods) + 1), methods, rotation=30, ha="right")
    ax.set_ylabel(metric)
    ax.grid(axis="y", alpha=0.3)
    return _finish(fig, path)


def rmse_evolution(block_rows, path):
    """Mean RMSE per block, one line per pipeline."""
    fig, ax = plt.subplots(figsize=(5, 3.5))
    by_run = defaultdict(list)
    for r in block_rows:
        by_run[r["run"]].append((int(r["block"]), float(r["rmse_output"])))
    for run, pts in sorted(by_run.items()):
        pts.sort()
        ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", label=run)
    ax.set_xlabel("block")
    ax.set_ylabel("mean RMSE (HU)")
    if by_run:
        ax.legend(fontsize="small")
    ax.grid(alpha=0.3)
    return _finish(fig, path)


def lambda_per_block(block_rows, path):
    fig, ax = plt.subplots(figsize=(5, 3.5))
    by_run = defaultdict(list)
    for r in block_rows:
        if r.get("lambda") not in (None, ""):
            by_run[r["run"]].append((int(r["block"]), float(r["lambda"])))
    for run, pts in sorted(by_run.items()):
        pts.sort()
        ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="s", label=run)
    ax.set_xlabel("block")
    ax.set_ylabel("lambda")
    ax.set_ylim(0, 1)
    if by_run:
        ax.legend(fontsize="small")
    ax.grid(alpha=0.3)
    return _finish(fig, path)
