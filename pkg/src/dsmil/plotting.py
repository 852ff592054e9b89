"""Report figures rendered to files (no display needed)."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_COMPONENTS = ("cls", "det", "estimator", "predictor")


def loss_curve(log: list[dict], path) -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    if log:
        its = [r["iteration"] for r in log]
        ax.plot(its, [r["loss"] for r in log], label="total", color="black")
        for key in _COMPONENTS:
            if any(key in r for r in log):
                ax.plot(its, [r.get(key, np.nan) for r in log], label=key, linewidth=0.8)
        ax.legend()
    else:
        ax.text(0.5, 0.5, "no iterations run", ha="center", va="center", transform=ax.transAxes)
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def ablation_chart(rows: list[dict], path) -> None:
    """Bar per variant at its median mAP, with per-seed values as dots."""
    fig, ax = plt.subplots(figsize=(max(6, 0.9 * len(rows)), 4))
    x = np.arange(len(rows))
    ax.bar(x, [100 * r["median_map"] for r in rows], color="#8fb3d9")
    for i, r in enumerate(rows):
        vals = [100 * v for v in r["map"]]
        ax.scatter([i] * len(vals), vals, color="black", s=10, zorder=3)
    ax.set_xticks(x)
    ax.set_xticklabels([r["variant"] for r in rows], rotation=30, ha="right")
    ax.set_ylabel("mAP (%)")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def attention_heatmap(weights: np.ndarray, path, title: str = "") -> None:
    fig, ax = plt.subplots(figsize=(5, 4.5))
    im = ax.imshow(weights, cmap="viridis", vmin=0.0)
    fig.colorbar(im, ax=ax)
    ax.set_xlabel("attended proposal")
    ax.set_ylabel("proposal")
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
