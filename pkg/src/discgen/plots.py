"""Matplotlib figure rendering for the report paths.

Figures are always written to files (Agg backend); the delimited CSV output
remains the contract, plots are a convenience layer on top of it.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def plot_loss_curve(losses, lrs, path, title="training loss") -> Path:
    path = Path(path)
    fig, ax1 = plt.subplots(figsize=(6, 4))
    steps = np.arange(len(losses))
    ax1.plot(steps, losses, lw=0.8, color="tab:blue")
    ax1.set_xlabel("step")
    ax1.set_ylabel("loss", color="tab:blue")
    ax1.set_yscale("log")
    ax2 = ax1.twinx()
    ax2.plot(steps, lrs, lw=0.8, color="tab:orange", alpha=0.6)
    ax2.set_ylabel("learning rate", color="tab:orange")
    ax1.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def plot_confusion(report, path, title="first-placement confusion") -> Path:
    path = Path(path)
    n = len(report.tasks)
    fig, ax = plt.subplots(figsize=(5.5, 4.5))
    im = ax.imshow(report.confusion, cmap="viridis", vmin=0, vmax=1)
    labels = [f"{k},{j}" for k, j in report.tasks]
    ax.set_xticks(range(n + 1), labels + ["none"], rotation=45, fontsize=7)
    ax.set_yticks(range(n), labels, fontsize=7)
    ax.set_xlabel("executed placement")
    ax.set_ylabel("instructed task")
    ax.set_title(title)
    fig.colorbar(im, ax=ax, shrink=0.8)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def plot_manifold(result, path, title="generated-policy projection") -> Path:
    path = Path(path)
    fig, ax = plt.subplots(figsize=(5, 4.5))
    objs = sorted({k for k, _ in result.tasks})
    cmap = plt.get_cmap("tab10")
    for oi, obj in enumerate(objs):
        pts = np.array([c for (k, _), c in zip(result.tasks, result.coords) if k == obj])
        ax.scatter(pts[:, 0], pts[:, 1], color=cmap(oi), label=f"object {obj}", s=40)
    for (k, j), (x, y) in zip(result.tasks, result.coords):
        ax.annotate(f"{k},{j}", (x, y), fontsize=7, xytext=(3, 3),
                    textcoords="offset points")
    ax.set_xlabel("pc1")
    ax.set_ylabel("pc2")
    ax.set_title(title)
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def plot_adaptation(results_by_label, path, title="few-shot adaptation") -> Path:
    """results_by_label: {label: AdaptResult}."""
    path = Path(path)
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 4))
    for label, res in results_by_label.items():
        ax1.plot(res.checkpoints, res.val_losses, marker="o", label=label)
        if not any(np.isnan(res.successes)):
            ax2.plot(res.checkpoints, res.successes, marker="o", label=label)
    ax1.set_xlabel("adaptation step")
    ax1.set_ylabel("validation loss")
    ax1.set_yscale("log")
    ax2.set_xlabel("adaptation step")
    ax2.set_ylabel("success rate")
    ax1.legend(fontsize=8)
    fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path
