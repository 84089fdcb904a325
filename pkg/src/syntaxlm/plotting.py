"""Figures written next to the CLI's text reports (non-interactive backend)."""
from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_mask(A: np.ndarray, tokens: Sequence[str], path: str | Path, title: str = "attention mask") -> Path:
    n = len(tokens)
    size = max(4.0, 0.35 * n)
    fig, ax = plt.subplots(figsize=(size, size))
    ax.imshow(np.asarray(A, dtype=float), cmap="Greys", vmin=0, vmax=1)
    ax.set_xticks(range(n))
    ax.set_yticks(range(n))
    ax.set_xticklabels(tokens, rotation=90, fontsize=8)
    ax.set_yticklabels(tokens, fontsize=8)
    ax.set_xlabel("attended position")
    ax.set_ylabel("attending position")
    ax.set_title(title)
    return _save(fig, path)


def plot_training(metrics: Sequence[Mapping], path: str | Path) -> Path:
    fig, ax = plt.subplots(figsize=(6, 4))
    for split, style in (("train", "-"), ("valid", "o-")):
        pts = [(m["step"], m["nll"]) for m in metrics if m["split"] == split]
        if pts:
            x, y = zip(*pts)
            ax.plot(x, y, style, label=split)
    ax.set_xlabel("step")
    ax.set_ylabel("NLL per event (nats)")
    ax.legend()
    return _save(fig, path)


def plot_sg(suites: Mapping[str, float], path: str | Path, title: str = "") -> Path:
    names = list(suites)
    fig, ax = plt.subplots(figsize=(max(4, 1.2 * len(names)), 3.5))
    ax.bar(names, [100 * suites[s] for s in names], color="0.4")
    ax.axhline(50, ls="--", color="0.7", lw=1)
    ax.set_ylim(0, 100)
    ax.set_ylabel("accuracy (%)")
    if title:
        ax.set_title(title)
    return _save(fig, path)


def plot_deltas(deltas: Sequence[float], path: str | Path, bins: int = 50) -> Path:
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.hist(np.asarray(deltas, dtype=float), bins=bins, color="0.4")
    ax.axvline(0, color="k", lw=1)
    ax.set_xlabel("Δ log p (nats)")
    ax.set_ylabel("events")
    return _save(fig, path)
