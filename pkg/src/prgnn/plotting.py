"""Figures written next to the CSV reports (PNG, Agg backend)."""
from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {"font.size": 9, "axes.spines.top": False, "axes.spines.right": False,
         "savefig.dpi": 120, "figure.dpi": 120}


def _save(fig, path) -> Path:
    path = Path(path)
    fig.savefig(path, bbox_inches="tight")
    plt.close(fig)
    return path


def plot_score_histograms(reports, path, max_curves: int = 20) -> Path:
    """Per-layer score distributions over epochs, stacked with a vertical offset."""
    n_layers = len(reports[0].histograms)
    step = max(1, len(reports) // max_curves)
    shown = reports[::step]
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, n_layers, figsize=(4 * n_layers, 4), squeeze=False)
        centers = (np.arange(20) + 0.5) / 20
        cmap = plt.get_cmap("viridis")
        for layer, ax in enumerate(axes[0]):
            for k, r in enumerate(shown):
                counts = np.asarray(r.histograms[layer], dtype=float)
                dens = counts / max(counts.sum(), 1)
                offset = 0.15 * k
                ax.fill_between(centers, offset, dens + offset, color=cmap(k / max(len(shown) - 1, 1)),
                                alpha=0.7, lw=0.5, edgecolor="k")
            ax.set_xlim(0, 1)
            ax.set_xlabel("pooling score")
            ax.set_yticks([])
            ax.set_title(f"pooling layer {layer + 1} (epochs {shown[0].epoch} to {shown[-1].epoch})")
        return _save(fig, path)


def plot_training_curves(reports, path) -> Path:
    epochs = [r.epoch for r in reports]
    with plt.rc_context(STYLE):
        fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.2))
        ax1.plot(epochs, [r.ce for r in reports], label="ce")
        for layer in range(len(reports[0].dist)):
            ax1.plot(epochs, [r.dist[layer] for r in reports], label=f"dist l{layer + 1}")
        ax1.plot(epochs, [r.glc for r in reports], label="glc")
        ax1.set_xlabel("epoch")
        ax1.set_yscale("log")
        ax1.legend(frameon=False)
        for layer in range(len(reports[0].gap)):
            ax2.plot(epochs, [r.gap[layer] for r in reports], label=f"kept-dropped gap l{layer + 1}")
        ax2.plot(epochs, [r.train_accuracy for r in reports], "k--", lw=0.8, label="train acc")
        if reports[0].val_accuracy is not None:
            ax2.plot(epochs, [r.val_accuracy for r in reports], "k:", lw=0.8, label="val acc")
        ax2.set_xlabel("epoch")
        ax2.legend(frameon=False)
        return _save(fig, path)


def plot_salient_nodes(ranking, path, planted: Sequence[int] = (), names=None) -> Path:
    planted = set(planted)
    ids = [s.node_id for s in ranking]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(max(4, 0.28 * len(ids)), 3))
        colors = ["tab:red" if i in planted else "tab:gray" for i in ids]
        ax.bar(range(len(ids)), [s.mean_score for s in ranking], color=colors)
        labels = [names.get(i, str(i)) if names else str(i) for i in ids]
        ax.set_xticks(range(len(ids)), labels, rotation=90)
        ax.set_ylabel("mean layer-1 score")
        ax.set_ylim(0, 1)
        if planted:
            ax.set_title("red: planted nodes")
        return _save(fig, path)


def plot_overlap(matrix: np.ndarray, path, title: str = "") -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4, 3.4))
        im = ax.imshow(matrix, vmin=0, vmax=1, cmap="magma")
        fig.colorbar(im, ax=ax, label="Jaccard")
        ax.set_xlabel("instance")
        ax.set_ylabel("instance")
        if title:
            ax.set_title(title)
        return _save(fig, path)


def plot_sweep(rows, path) -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 3))
        x = np.arange(len(rows))
        ax.errorbar(x, [r["mean"] for r in rows], yerr=[r["std"] for r in rows], fmt="o-", capsize=3)
        ax.set_xticks(x, [r["cell"] for r in rows])
        ax.set_xlabel("lambda1-lambda2")
        ax.set_ylabel("CV accuracy")
        return _save(fig, path)
