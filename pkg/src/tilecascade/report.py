"""Figure rendering for pipeline artifacts.

Every artifact-producing subcommand pairs its delimited report with a small
PNG: a loss curve for training runs, level previews for pyramids, a metric
bar chart and a 2-D feature projection for evaluation runs. The Agg backend
is forced so the figures render identically on headless machines.
"""

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .training import smoothed

DPI = 110


def _chw_to_hwc(img: np.ndarray) -> np.ndarray:
    return np.clip(np.transpose(img, (1, 2, 0)), 0.0, 1.0)


def loss_curve(path, history: list, window: int = 50,
               title: str = "training loss") -> str:
    """Raw per-step loss with its trailing moving average overlaid."""
    steps = [row["step"] for row in history]
    losses = [row["loss"] for row in history]
    fig, ax = plt.subplots(figsize=(7.0, 4.0))
    if steps:
        ax.plot(steps, losses, lw=0.6, alpha=0.4, label="loss")
        ax.plot(steps, smoothed(losses, window), lw=1.6,
                label=f"smoothed (window {window})")
        ax.set_yscale("log")
        ax.legend()
    ax.set_xlabel("step")
    ax.set_ylabel("mse")
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=DPI)
    plt.close(fig)
    return path


def pyramid_preview(path, pyramid) -> str:
    """All magnification levels of one pyramid side by side."""
    levels = pyramid.levels
    fig, axes = plt.subplots(1, len(levels), figsize=(4.0 * len(levels), 4.4))
    for ax, img in zip(np.atleast_1d(axes), levels):
        ax.imshow(_chw_to_hwc(img), interpolation="nearest")
        ax.set_title(f"{img.shape[1]} x {img.shape[2]}")
        ax.set_xticks([])
        ax.set_yticks([])
    fig.suptitle(pyramid.slide_id)
    fig.tight_layout()
    fig.savefig(path, dpi=DPI)
    plt.close(fig)
    return path


def metrics_bar(path, values: dict) -> str:
    """One labelled bar per metric."""
    keys = sorted(values)
    vals = [float(values[k]) for k in keys]
    fig, ax = plt.subplots(figsize=(1.6 + 1.3 * len(keys), 4.0))
    ax.bar(range(len(keys)), vals, color="#4878cf")
    ax.set_xticks(range(len(keys)), keys, rotation=20, ha="right")
    for i, v in enumerate(vals):
        ax.annotate(f"{v:.4g}", (i, v), ha="center", va="bottom", fontsize=8)
    ax.set_title("metrics")
    fig.tight_layout()
    fig.savefig(path, dpi=DPI)
    plt.close(fig)
    return path


def feature_scatter(path, real_feats: np.ndarray, gen_feats: np.ndarray) -> str:
    """Both feature sets projected onto the pooled top-2 principal axes."""
    pooled = np.concatenate([real_feats, gen_feats])
    center = pooled.mean(axis=0)
    _, _, vt = np.linalg.svd(pooled - center, full_matrices=False)
    if vt.shape[0] < 2:
        vt = np.vstack([vt, np.zeros((2 - vt.shape[0], vt.shape[1]))])
    axes2 = vt[:2].T
    r2 = (real_feats - center) @ axes2
    g2 = (gen_feats - center) @ axes2
    fig, ax = plt.subplots(figsize=(5.0, 5.0))
    ax.scatter(r2[:, 0], r2[:, 1], s=18, alpha=0.7, label="real")
    ax.scatter(g2[:, 0], g2[:, 1], s=22, alpha=0.7, marker="x", label="generated")
    ax.set_xlabel("pc 1")
    ax.set_ylabel("pc 2")
    ax.set_title("feature projection")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=DPI)
    plt.close(fig)
    return path
