"""Figure helpers for the CLI: training curves, 1-D sample histograms, rollouts.

Everything renders headless (Agg) straight to PNG.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.dpi": 110,
    "font.size": 9,
    "axes.titlesize": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
}

COLORS = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"]


def new(nrows=1, ncols=1, width=6.0, height=None):
    height = width * 0.62 * nrows / ncols if height is None else height
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(nrows, ncols, figsize=(width, height), squeeze=False)
    return fig, ax


def save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.stem + ".tmp" + path.suffix)
    with plt.rc_context(STYLE):
        fig.tight_layout()
        fig.savefig(tmp)
    plt.close(fig)
    tmp.replace(path)
    return path


def training_curves(runs: dict[str, list[dict]], path, metrics=("l_total", "l_mse", "l_drift", "w_drift")) -> Path:
    """One panel per metric, one line per run. Loss panels use a log axis."""
    fig, ax = new(1, len(metrics), width=3.0 * len(metrics), height=2.6)
    for j, name in enumerate(metrics):
        a = ax[0, j]
        for i, (label, rows) in enumerate(runs.items()):
            x = [r["epoch"] for r in rows]
            y = [r[name] for r in rows]
            a.plot(x, y, color=COLORS[i % len(COLORS)], lw=1.0, label=label)
        if name.startswith("l_") and all(r[name] > 0 for rows in runs.values() for r in rows):
            a.set_yscale("log")
        a.set_title(name)
        a.set_xlabel("epoch")
    ax[0, 0].legend(frameon=False)
    return save(fig, path)


def sample_histograms(samples: list[np.ndarray], demos: list[np.ndarray], path, centers=None) -> Path:
    """Per-context histogram of flattened sample coordinates against the demos."""
    n = len(samples)
    fig, ax = new(1, n, width=3.2 * n, height=2.6)
    for k in range(n):
        a = ax[0, k]
        s = np.ravel(samples[k])
        d = np.ravel(demos[k])
        lo, hi = min(s.min(), d.min()) - 0.1, max(s.max(), d.max()) + 0.1
        bins = np.linspace(lo, hi, 60)
        a.hist(s, bins=bins, density=True, color=COLORS[0], alpha=0.7, label="samples")
        a.hist(d, bins=bins, density=True, histtype="step", color=COLORS[1], lw=1.2, label="demos")
        if centers is not None:
            for c in np.unique(np.ravel(centers)):
                a.axvline(c, color="0.4", lw=0.6, ls=":")
        a.set_title(f"context {k}")
    ax[0, 0].legend(frameon=False)
    return save(fig, path)


def rollouts(paths: list[np.ndarray], collided: list[bool], task, path, demos=None) -> Path:
    fig, ax = new(1, 1, width=3.6, height=3.6)
    a = ax[0, 0]
    if demos is not None:
        start = np.asarray(task.start, float)
        for d in demos:
            p = np.vstack([start, d])
            a.plot(p[:, 0], p[:, 1], color="0.75", lw=0.8, zorder=1)
    for p, hit in zip(paths, collided):
        a.plot(p[:, 0], p[:, 1], color=COLORS[1] if hit else COLORS[0], lw=0.7, alpha=0.6, zorder=2)
    a.add_patch(plt.Circle(task.center, task.radius, color="k", alpha=0.25, zorder=3))
    a.plot(*task.start, "ko", ms=3)
    a.plot(*task.goal, "k*", ms=6)
    a.set_aspect("equal")
    a.set_title(f"{len(paths)} rollouts, {int(np.sum(collided))} collisions")
    return save(fig, path)
