"""Figures for evaluation reports (PGM montages and matplotlib PNGs)."""
from __future__ import annotations

from pathlib import Path

import numpy as np
import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

PANEL_TITLES = ("low dose", "synthetic", "full dose", "|difference|")


def montage_array(low, pred, full):
    """Side-by-side (low, pred, full, |pred - full|) panels, one slice tall."""
    low, pred, full = (np.asarray(a, dtype=np.float64) for a in (low, pred, full))
    return np.concatenate([low, pred, full, np.abs(pred - full)], axis=1)


def write_pgm(path, image, vmax=None) -> None:
    """8-bit binary PGM, linearly scaled from 0 to ``vmax`` (default: image max)."""
    img = np.asarray(image, dtype=np.float64)
    vmax = float(img.max()) if vmax is None else float(vmax)
    scaled = np.clip(img / vmax, 0.0, 1.0) if vmax > 0 else np.zeros_like(img)
    data = np.round(scaled * 255).astype(np.uint8)
    h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode())
        fh.write(data.tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(maxsplit=4)
    w, h = int(parts[1]), int(parts[2])
    return np.frombuffer(parts[4], dtype=np.uint8).reshape(h, w)


def save_montage_png(path, low, pred, full, title="") -> None:
    vmax = float(np.max(full))
    fig, axes = plt.subplots(1, 4, figsize=(10, 2.8))
    for ax, img, name in zip(axes, (low, pred, full, np.abs(np.asarray(pred) - full)), PANEL_TITLES):
        ax.imshow(img, cmap="gray_r", vmin=0, vmax=vmax)
        ax.set_title(name, fontsize=9)
        ax.set_xticks([])
        ax.set_yticks([])
    if title:
        fig.suptitle(title, fontsize=10)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def save_metric_bars(path, summary: dict, metrics=("nmae_pct", "psnr_db", "ms_ssim", "ncc")) -> None:
    """One bar group per metric, one bar per method; ``summary[method][metric]``."""
    methods = list(summary)
    fig, axes = plt.subplots(1, len(metrics), figsize=(3 * len(metrics), 3))
    axes = np.atleast_1d(axes)
    for ax, m in zip(axes, metrics):
        vals = [summary[k].get(m) or 0.0 for k in methods]
        ax.bar(range(len(methods)), vals, color="0.5")
        ax.set_xticks(range(len(methods)))
        ax.set_xticklabels(methods, rotation=45, ha="right", fontsize=8)
        ax.set_title(m, fontsize=9)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
