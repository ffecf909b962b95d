"""Matplotlib figure rendering for training logs and evaluation reports.
All figures are written to files (Agg backend, no display)."""

from __future__ import annotations

from pathlib import Path

import matplotlib
import numpy as np

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def loss_curve(log_path: str | Path, out_png: str | Path, title: str = "training loss") -> Path:
    steps, losses = [], []
    for line in Path(log_path).read_text().splitlines():
        if not line.strip():
            continue
        s, v = line.split("\t")
        steps.append(int(s))
        losses.append(float(v))
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot(steps, losses, lw=0.8)
    if len(losses) > 20:
        k = max(1, len(losses) // 50)
        smooth = np.convolve(losses, np.ones(k) / k, mode="valid")
        ax.plot(steps[k - 1:], smooth, lw=1.6)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)
    return Path(out_png)


def similarity_hist(cos_target: list[float], cos_source: list[float],
                    out_png: str | Path) -> Path:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    bins = np.linspace(-1, 1, 41)
    ax.hist(cos_target, bins=bins, alpha=0.6, label="to target centroid")
    ax.hist(cos_source, bins=bins, alpha=0.6, label="to source centroid")
    ax.set_xlabel("cosine similarity")
    ax.set_ylabel("conversions")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)
    return Path(out_png)


def embedding_scatter(embeddings: np.ndarray, labels: list[str],
                      out_png: str | Path) -> Path:
    """2-D PCA projection of coarse timbre embeddings, colored by speaker."""
    x = embeddings - embeddings.mean(axis=0)
    _, _, vt = np.linalg.svd(x, full_matrices=False)
    proj = x @ vt[:2].T
    fig, ax = plt.subplots(figsize=(5, 4.5))
    for spk in sorted(set(labels)):
        mask = np.array([l == spk for l in labels])
        ax.scatter(proj[mask, 0], proj[mask, 1], s=14, label=spk, alpha=0.75)
    ax.set_xlabel("PC 1")
    ax.set_ylabel("PC 2")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)
    return Path(out_png)
