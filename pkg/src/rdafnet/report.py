"""Figures written next to the CSV outputs of the command line tools."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from PIL import Image  # noqa: E402

plt.rcParams.update({
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 120,
    "savefig.bbox": "tight",
})


def _save(fig, path) -> Path:
    path = Path(path)
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def loss_curve(history: Sequence[tuple[int, float, float]], path, title: str = "training loss") -> Path:
    """Loss per epoch on a log axis, learning rate on a twin axis."""
    epochs = [h[0] for h in history]
    fig, ax = plt.subplots(figsize=(4.5, 3))
    ax.plot(epochs, [h[1] for h in history], color="tab:blue", lw=1.2)
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    if history and min(h[1] for h in history) > 0:
        ax.set_yscale("log")
    ax2 = ax.twinx()
    ax2.plot(epochs, [h[2] for h in history], color="tab:gray", lw=0.8, ls="--")
    ax2.set_ylabel("learning rate", color="tab:gray")
    ax2.spines["right"].set_visible(True)
    ax.set_title(title)
    return _save(fig, path)


def ablation_chart(rows: Sequence[dict], path) -> Path:
    """Final loss per variant: one dot per seed, a bar at the seed median."""
    variants = list(dict.fromkeys(r["variant"] for r in rows))
    fig, ax = plt.subplots(figsize=(1.3 * len(variants) + 1.5, 3))
    for i, v in enumerate(variants):
        losses = [r["final_loss"] for r in rows if r["variant"] == v and np.isfinite(r["final_loss"])]
        if losses:
            ax.bar(i, np.median(losses), color="tab:blue", alpha=0.35, width=0.6)
            ax.scatter([i] * len(losses), losses, color="tab:blue", s=12, zorder=3)
        else:
            ax.text(i, 0, "diverged", ha="center", va="bottom", rotation=90, color="tab:red")
    ax.set_xticks(range(len(variants)))
    ax.set_xticklabels(variants, rotation=20, ha="right")
    ax.set_ylabel("final training loss")
    return _save(fig, path)


def attention_heatmap(amap: np.ndarray, path, title: str = "") -> Path:
    """Colored heat map of a (H, W) attention map, scaled to its own value range."""
    lo, hi = float(np.min(amap)), float(np.max(amap))
    if hi - lo < 1e-12:
        lo, hi = lo - 0.5e-3, hi + 0.5e-3
    fig, ax = plt.subplots(figsize=(3.2, 3))
    im = ax.imshow(amap, cmap="inferno", vmin=lo, vmax=hi, interpolation="nearest")
    ax.set_axis_off()
    if title:
        ax.set_title(title)
    fig.colorbar(im, ax=ax, fraction=0.046, pad=0.04)
    return _save(fig, path)


def grayscale_map(amap: np.ndarray, path) -> Path:
    """Single-channel 8-bit PNG of a (H, W) map, min-max normalized to 0..255."""
    path = Path(path)
    lo, hi = float(np.min(amap)), float(np.max(amap))
    scaled = (amap - lo) / (hi - lo) if hi - lo > 1e-12 else np.zeros_like(amap)
    Image.fromarray(np.floor(scaled * 255 + 0.5).astype(np.uint8), mode="L").save(path)
    return path
