"""Report figures, rendered off-screen with the Agg backend."""

from __future__ import annotations

from collections.abc import Mapping, Sequence
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

__all__ = ["plot_metric_bars", "plot_ablation", "plot_stability", "plot_losses"]


def _save(fig, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_metric_bars(systems: Mapping[str, Mapping[str, float]], path: str | Path, title: str = "Retrieval metrics") -> Path:
    """Grouped bars, one group per metric and one bar per system, in percent."""
    names = list(systems)
    metrics = list(next(iter(systems.values()))) if systems else []
    x = np.arange(len(metrics))
    width = 0.8 / max(len(names), 1)
    fig, ax = plt.subplots(figsize=(1.6 + 1.2 * len(metrics), 3.6))
    for i, name in enumerate(names):
        vals = [100.0 * systems[name][m] for m in metrics]
        bars = ax.bar(x + (i - (len(names) - 1) / 2) * width, vals, width, label=name)
        ax.bar_label(bars, fmt="%.1f", fontsize=7)
    ax.set_xticks(x, metrics)
    ax.set_ylim(0, 105)
    ax.set_ylabel("%")
    ax.set_title(title)
    ax.legend(fontsize=8, loc="lower right")
    return _save(fig, path)


def plot_ablation(rec1: Mapping[str, Sequence[float]], path: str | Path) -> Path:
    """Mean Rec@1 per context mode with per-seed points overlaid."""
    modes = list(rec1)
    means = [100.0 * float(np.mean(rec1[m])) for m in modes]
    fig, ax = plt.subplots(figsize=(4.2, 3.4))
    ax.bar(modes, means, color="#8fb3d9")
    for i, m in enumerate(modes):
        pts = 100.0 * np.asarray(rec1[m], dtype=float)
        ax.scatter(np.full(len(pts), i), pts, color="k", s=12, zorder=3)
    ax.set_ylabel("Rec@1 (%)")
    ax.set_title("Context selection ablation")
    return _save(fig, path)


def plot_stability(trials: Sequence[Mapping[str, float]], path: str | Path) -> Path:
    """Per-trial metric values, one line per metric, in percent."""
    fig, ax = plt.subplots(figsize=(5.0, 3.4))
    if trials:
        for m in trials[0]:
            ax.plot(range(1, len(trials) + 1), [100.0 * t[m] for t in trials], marker="o", ms=3, label=m)
    ax.set_xlabel("trial")
    ax.set_ylabel("%")
    ax.set_title("Metric stability across resampled test sets")
    ax.legend(fontsize=7, ncol=2)
    return _save(fig, path)


def plot_losses(curves: Mapping[str, Sequence[float]], path: str | Path) -> Path:
    fig, ax = plt.subplots(figsize=(4.6, 3.2))
    for name, losses in curves.items():
        ax.plot(range(1, len(losses) + 1), losses, marker="o", ms=3, label=name)
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean batch loss")
    ax.set_yscale("log")
    ax.legend(fontsize=8)
    return _save(fig, path)
