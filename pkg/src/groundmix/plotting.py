"""Report figures written next to the CSV outputs."""

from __future__ import annotations

import math
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

# fixed metadata keeps PNG bytes stable between runs
_SAVE_KW = dict(dpi=100, metadata={"Software": None})


def _bar_hist(ax, hist, title, xlabel, degrees=False):
    edges = hist.lower_edges
    scale = 180.0 / math.pi if degrees else 1.0
    ax.bar(edges * scale, hist.counts, width=hist.bin_width * scale, align="edge",
           color="0.35", edgecolor="white", linewidth=0.5)
    ax.set_title(title, fontsize=10)
    ax.set_xlabel(xlabel, fontsize=9)
    ax.tick_params(labelsize=8)
    ax.spines[["top", "right"]].set_visible(False)


def plot_stats(stats, path) -> Path:
    """Depth, heading and dimension histograms plus category counts."""
    path = Path(path)
    fig, axes = plt.subplots(2, 3, figsize=(11, 6))
    _bar_hist(axes[0, 0], stats.depth, "depth", "z [m]")
    if stats.rotation is not None:
        _bar_hist(axes[0, 1], stats.rotation, "heading w.r.t. ground normal", "angle [deg]", degrees=True)
    else:
        axes[0, 1].axis("off")
    cats = stats.category_counts
    axes[0, 2].bar(range(len(cats)), list(cats.values()), color="0.35")
    axes[0, 2].set_xticks(range(len(cats)), list(cats.keys()), fontsize=8, rotation=30)
    axes[0, 2].set_title("categories", fontsize=10)
    axes[0, 2].spines[["top", "right"]].set_visible(False)
    for ax, hist, name in zip(axes[1], (stats.width, stats.height, stats.length), ("width", "height", "length")):
        _bar_hist(ax, hist, name, f"{name} [m]")
    fig.suptitle(f"{stats.box_count} boxes", fontsize=11)
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)
    return path


def plot_pr_curves(rows: Sequence, path, threshold: float = 0.5) -> Path:
    """Interpolated 40-point precision/recall curves, one line per class."""
    path = Path(path)
    fig, ax = plt.subplots(figsize=(5.5, 4.5))
    for r in rows:
        if r.n_gt == 0:
            continue
        ax.step(r.curve.recall_levels, r.curve.precision, where="post",
                label=f"{r.name} (AP={r.ap3d:.3f})")
    ax.set_xlim(0, 1.0)
    ax.set_ylim(0, 1.05)
    ax.set_xlabel("recall")
    ax.set_ylabel("interpolated precision")
    ax.set_title(f"AP3D R40 @ IoU {threshold:g}", fontsize=10)
    ax.grid(alpha=0.3)
    if ax.get_legend_handles_labels()[0]:
        ax.legend(fontsize=8, loc="lower left")
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)
    return path
