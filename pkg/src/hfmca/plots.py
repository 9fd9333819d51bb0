"""Report figures rendered to files alongside the delimited outputs."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

_DPI = 120


def save_training_curves(metrics: Sequence[dict], path: str | Path) -> None:
    """Loss components and the collapse measure over optimizer steps."""
    steps = [row["step"] for row in metrics]
    fig, (ax_loss, ax_collapse) = plt.subplots(2, 1, figsize=(7, 6), sharex=True)
    ax_loss.plot(steps, [row["loss_total"] for row in metrics], label="total")
    ax_loss.plot(steps, [row["loss_logdet"] for row in metrics], label="logdet")
    ax_loss.plot(steps, [row["loss_cont"] for row in metrics], label="contrastive")
    ax_loss.set_ylabel("loss")
    ax_loss.set_yscale("symlog")
    ax_loss.legend(loc="best")
    ax_collapse.plot(steps, [row["z_var_min"] for row in metrics], color="tab:red")
    ax_collapse.set_ylabel("min z variance")
    ax_collapse.set_xlabel("step")
    fig.tight_layout()
    fig.savefig(path, dpi=_DPI)
    plt.close(fig)


def save_accuracy_bars(
    subjects: Sequence[int], accuracies: Sequence[float], mean: float, path: str | Path
) -> None:
    """Per-subject probe accuracy with the mean as a horizontal line."""
    fig, ax = plt.subplots(figsize=(6, 4))
    positions = range(len(subjects))
    ax.bar(positions, accuracies, color="tab:blue")
    ax.axhline(mean, color="tab:orange", linestyle="--", label=f"mean {mean:.3f}")
    ax.set_xticks(list(positions))
    ax.set_xticklabels([f"S{s}" for s in subjects])
    ax.set_ylim(0.0, 1.0)
    ax.set_ylabel("accuracy")
    ax.set_xlabel("held-out subject")
    ax.legend(loc="lower right")
    fig.tight_layout()
    fig.savefig(path, dpi=_DPI)
    plt.close(fig)


def save_rho_spectrum(rhos: Sequence[float], path: str | Path) -> None:
    """Canonical-correlation spectrum as a bar chart."""
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.bar(range(len(rhos)), rhos, color="tab:green")
    ax.set_ylim(0.0, 1.0)
    ax.set_xlabel("component")
    ax.set_ylabel("canonical correlation")
    fig.tight_layout()
    fig.savefig(path, dpi=_DPI)
    plt.close(fig)


def save_view_grid(
    original, views: Sequence, kinds: Sequence[str], path: str | Path, max_channels: int = 4
) -> None:
    """Original segment and its augmented views, a few channels each."""
    panels = [("original", original)] + [
        (kinds[i], views[i]) for i in range(len(views))
    ]
    channels = min(max_channels, original.shape[0])
    fig, axes = plt.subplots(
        len(panels), 1, figsize=(7, 1.8 * len(panels)), sharex=True
    )
    if len(panels) == 1:
        axes = [axes]
    for ax, (name, view) in zip(axes, panels):
        for c in range(channels):
            ax.plot(view[c], linewidth=0.7)
        ax.set_ylabel(name, fontsize=8)
    axes[-1].set_xlabel("sample")
    fig.tight_layout()
    fig.savefig(path, dpi=_DPI)
    plt.close(fig)
