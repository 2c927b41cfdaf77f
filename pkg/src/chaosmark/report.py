"""Figure rendering for command reports. Import cost is deferred on purpose."""

from __future__ import annotations

import numpy as np


def _plt():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def save_density_figure(densities, dest, title="layer weight density") -> None:
    """Overlay the density curves of several models on one axis."""
    plt = _plt()
    fig, ax = plt.subplots(figsize=(7, 4.5))
    for density in densities:
        centers = (density.bin_edges[:-1] + density.bin_edges[1:]) / 2.0
        ax.plot(centers, density.densities, label=density.label or None, linewidth=1.2)
    ax.set_xlabel("weight value")
    ax.set_ylabel("density")
    ax.set_title(title)
    if any(d.label for d in densities):
        ax.legend()
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(dest, dpi=150)
    plt.close(fig)


def save_trace_figure(trace, dest, title="recovery convergence") -> None:
    """Best fitness per generation on a log scale."""
    plt = _plt()
    fig, ax = plt.subplots(figsize=(7, 4.5))
    values = np.asarray(list(trace), dtype=np.float64)
    positive = values[np.isfinite(values) & (values > 0)]
    ax.plot(np.arange(values.size), values, linewidth=1.4)
    if positive.size:
        ax.set_yscale("log")
    ax.set_xlabel("generation")
    ax.set_ylabel("best fitness")
    ax.set_title(title)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(dest, dpi=150)
    plt.close(fig)


def save_confusion_figure(matrix, dest, names=None, title="detection confusion") -> None:
    plt = _plt()
    counts = matrix.counts
    size = counts.shape[0]
    names = names or [f"class{i}" for i in range(size)]
    fig, ax = plt.subplots(figsize=(5.5, 4.8))
    image = ax.imshow(counts, cmap="Blues")
    for i in range(size):
        for j in range(size):
            shade = "white" if counts[i, j] > counts.max() / 2 else "black"
            ax.text(j, i, str(counts[i, j]), ha="center", va="center", color=shade)
    ax.set_xticks(range(size), names, rotation=30, ha="right")
    ax.set_yticks(range(size), names)
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    ax.set_title(title)
    fig.colorbar(image, ax=ax, shrink=0.85)
    fig.tight_layout()
    fig.savefig(dest, dpi=150)
    plt.close(fig)


def save_loss_figure(trace, dest, title="training loss") -> None:
    plt = _plt()
    fig, ax = plt.subplots(figsize=(7, 4.5))
    ax.plot(np.arange(len(trace)), trace, linewidth=1.4)
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean loss")
    ax.set_title(title)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(dest, dpi=150)
    plt.close(fig)
