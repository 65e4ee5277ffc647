"""Matplotlib figures for run reports (written to files, never shown)."""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path: str | Path) -> Path:
    path = Path(path)
    fig.tight_layout()
    # fixed metadata keeps the bytes stable across reruns
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)
    return path


def loss_curves(epochs: Sequence[Mapping], path: str | Path) -> Path:
    """Train/validation total loss per epoch on a log axis."""
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ep = [int(r["epoch"]) for r in epochs]
    for key, style in (("train_total", "-o"), ("val_total", "--s"), ("train_focal", ":")):
        if epochs and key in epochs[0]:
            ax.plot(ep, [float(r[key]) for r in epochs], style, label=key, markersize=3)
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend()
    ax.grid(alpha=0.3)
    return _save(fig, path)


def pr_curve(precision: np.ndarray, recall: np.ndarray, path: str | Path, title: str = "") -> Path:
    fig, ax = plt.subplots(figsize=(4, 4))
    ax.plot(recall, precision, drawstyle="steps-post")
    ax.set_xlim(0, 1.02)
    ax.set_ylim(0, 1.02)
    ax.set_xlabel("recall")
    ax.set_ylabel("precision")
    if title:
        ax.set_title(title)
    ax.grid(alpha=0.3)
    return _save(fig, path)


def sweep_bars(rows: Sequence[Mapping], path: str | Path, metric: str = "map_50") -> Path:
    """One bar per sweep row, labelled by the varied settings."""
    ok = [r for r in rows if r.get("status") == "ok"]
    labels = [f"r={r['r']} t={r['temperature']}\n{r['teachers']}\nmics={r['n_mics']} s={r['seed']}" for r in ok]
    fig, ax = plt.subplots(figsize=(max(4, 1.2 * len(ok)), 4))
    ax.bar(range(len(ok)), [float(r[metric]) for r in ok])
    ax.set_xticks(range(len(ok)), labels, fontsize=6)
    ax.set_ylabel(metric)
    ax.set_ylim(0, 1)
    return _save(fig, path)


def attention_panels(maps: Mapping[str, np.ndarray], path: str | Path) -> Path:
    fig, axes = plt.subplots(1, len(maps), figsize=(2.5 * len(maps), 2.6), squeeze=False)
    for ax, (name, m) in zip(axes[0], maps.items()):
        ax.imshow(m, cmap="magma")
        ax.set_title(name, fontsize=8)
        ax.axis("off")
    return _save(fig, path)
