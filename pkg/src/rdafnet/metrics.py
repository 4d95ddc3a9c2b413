"""PSNR and SSIM on 8-bit images, measured the save-as-PNG-then-compare way."""

from __future__ import annotations

import csv
import math
from typing import Iterable

import numpy as np


def to_uint8(x: np.ndarray) -> np.ndarray:
    """Map [-1, 1] floats to 8-bit with round-half-up."""
    v = (np.asarray(x, dtype=np.float64) + 1.0) * 127.5
    return np.clip(np.floor(v + 0.5), 0, 255).astype(np.uint8)


def _as_hwc(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img)
    if img.ndim == 4:
        if img.shape[0] != 1:
            raise ValueError(f"expected a single image, got batch of {img.shape[0]}")
        img = img[0]
    if img.ndim == 3 and img.shape[0] in (1, 3) and img.shape[-1] not in (1, 3):
        img = img.transpose(1, 2, 0)
    if img.ndim == 2:
        img = img[:, :, None]
    return img


def psnr(pred_u8: np.ndarray, target_u8: np.ndarray) -> float:
    """10 log10(255^2 / MSE) over all channels; +inf for identical images."""
    a = np.asarray(pred_u8, dtype=np.float64)
    b = np.asarray(target_u8, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"psnr: shapes {a.shape} and {b.shape} differ")
    mse = np.mean((a - b) ** 2)
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(255.0 ** 2 / mse)


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    r = np.arange(size, dtype=np.float64) - (size - 1) / 2
    g = np.exp(-(r ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    # separable correlation, keeping only windows fully inside the image
    k = g.size
    rows = sum(g[i] * img[i : img.shape[0] - k + 1 + i, :] for i in range(k))
    return sum(g[j] * rows[:, j : rows.shape[1] - k + 1 + j] for j in range(k))


def _ssim_plane(x: np.ndarray, y: np.ndarray, g: np.ndarray, L: float, k1: float, k2: float) -> float:
    c1, c2 = (k1 * L) ** 2, (k2 * L) ** 2
    mx, my = _filter_valid(x, g), _filter_valid(y, g)
    sxx = _filter_valid(x * x, g) - mx * mx
    syy = _filter_valid(y * y, g) - my * my
    sxy = _filter_valid(x * y, g) - mx * my
    num = (2 * mx * my + c1) * (2 * sxy + c2)
    den = (mx * mx + my * my + c1) * (sxx + syy + c2)
    return float(np.mean(num / den))


def ssim(pred_u8: np.ndarray, target_u8: np.ndarray, mode: str = "per_channel",
         win: int = 11, sigma: float = 1.5, k1: float = 0.01, k2: float = 0.03) -> float:
    """Single-scale SSIM with a Gaussian window.

    ``mode="per_channel"`` averages the per-channel scores of an RGB image;
    ``mode="luma"`` scores the BT.601 luminance only.
    """
    a = _as_hwc(pred_u8).astype(np.float64)
    b = _as_hwc(target_u8).astype(np.float64)
    if a.shape != b.shape:
        raise ValueError(f"ssim: shapes {a.shape} and {b.shape} differ")
    if a.shape[0] < win or a.shape[1] < win:
        raise ValueError(f"ssim: image {a.shape[0]}x{a.shape[1]} smaller than {win}x{win} window")
    g = gaussian_window(win, sigma)
    if mode == "luma":
        if a.shape[2] == 3:
            wts = np.array([65.481, 128.553, 24.966]) / 255.0
            a = a @ wts + 16.0
            b = b @ wts + 16.0
        else:
            a, b = a[:, :, 0], b[:, :, 0]
        return _ssim_plane(a, b, g, 255.0, k1, k2)
    if mode != "per_channel":
        raise ValueError(f"unknown ssim mode {mode!r}")
    return float(np.mean([_ssim_plane(a[:, :, c], b[:, :, c], g, 255.0, k1, k2) for c in range(a.shape[2])]))


def write_metrics_csv(path, rows: Iterable[tuple[str, float, float]], with_mean: bool = True) -> None:
    """Rows of (image_id, psnr_db, ssim); appends a ``mean`` row."""
    rows = list(rows)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["image_id", "psnr_db", "ssim"])
        for image_id, p, s in rows:
            w.writerow([image_id, f"{p:.6f}", f"{s:.6f}"])
        if with_mean and rows:
            w.writerow(["mean", f"{np.mean([r[1] for r in rows]):.6f}", f"{np.mean([r[2] for r in rows]):.6f}"])

