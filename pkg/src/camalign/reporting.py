"""Delimited outputs and rendered figures for evaluation artifacts."""

from __future__ import annotations

import csv

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)
import numpy as np


def write_sweep_csv(path, curve) -> None:
    """Columns: tau, then acc@<delta> for each delta ascending."""
    deltas = sorted(curve.accuracy_per_iou)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["tau"] + [f"acc@{d:g}" for d in deltas])
        for row in curve.rows():
            writer.writerow([f"{v:.10g}" for v in row])


def write_histogram_csv(path, edges, counts) -> None:
    """Columns: bin_low, bin_high, count."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["bin_low", "bin_high", "count"])
        for lo, hi, c in zip(edges[:-1], edges[1:], counts):
            writer.writerow([f"{lo:.10g}", f"{hi:.10g}", int(c)])


def render_sweep(path, curve) -> None:
    """Accuracy-vs-threshold curves, one line per IoU delta."""
    fig, ax = plt.subplots(figsize=(6, 4))
    for d in sorted(curve.accuracy_per_iou):
        ax.plot(curve.thresholds, curve.accuracy_per_iou[d], label=f"IoU ≥ {d:g}")
    ax.set_xlabel("binarization threshold τ")
    ax.set_ylabel("box accuracy")
    ax.set_ylim(-0.02, 1.02)
    ax.legend()
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def render_histograms(path, stats) -> None:
    """Side-by-side in-box similarity and normalized-norm histograms."""
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.5))
    for ax, edges, counts, title in (
            (ax1, stats.hist_sim_edges, stats.hist_sim_counts,
             "similarity inside gt boxes"),
            (ax2, stats.hist_norm_edges, stats.hist_norm_counts,
             "normalized norm inside gt boxes")):
        edges = np.asarray(edges, dtype=float)
        ax.bar(edges[:-1], counts, width=np.diff(edges), align="edge",
               edgecolor="black", linewidth=0.3)
        ax.set_title(title, fontsize=10)
        ax.set_ylabel("count")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def render_decomposition(path, maps: dict) -> None:
    """Panel of named 2-d maps (used by the decompose command)."""
    n = len(maps)
    fig, axes = plt.subplots(1, n, figsize=(3 * n, 3))
    if n == 1:
        axes = [axes]
    for ax, (name, m) in zip(axes, maps.items()):
        im = ax.imshow(np.asarray(m), cmap="viridis")
        ax.set_title(name, fontsize=10)
        ax.axis("off")
        fig.colorbar(im, ax=ax, fraction=0.046)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
