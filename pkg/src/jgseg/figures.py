"""Static figure output: sample grids (PIL) and report plots (matplotlib, Agg backend)."""
from __future__ import annotations

from pathlib import Path
from typing import Dict, List, Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from PIL import Image  # noqa: E402

from .data import to_uint8  # noqa: E402

PALETTE = np.array([
    [0, 0, 0], [230, 25, 75], [60, 180, 75], [255, 225, 25], [0, 130, 200],
    [245, 130, 48], [145, 30, 180], [70, 240, 240],
], dtype=np.uint8)


def colorize(labels: np.ndarray) -> np.ndarray:
    """[H, W] class ids -> [H, W, 3] uint8."""
    return PALETTE[np.asarray(labels) % len(PALETTE)]


def _to_rgb(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    if x.dtype != np.uint8:
        x = to_uint8(x)
    if x.ndim == 2:
        x = np.repeat(x[..., None], 3, axis=-1)
    elif x.shape[-1] == 1:
        x = np.repeat(x, 3, axis=-1)
    return x


def save_grid(tiles: Sequence[np.ndarray], path, ncol: int = 8, pad: int = 1, scale: int = 1) -> Path:
    """Tile images ([C, H, W] floats in [-1, 1], or ready [H, W(, 3)] uint8) into one PNG."""
    if not tiles:
        raise ValueError("no tiles to save")
    rgb = [_to_rgb(t) for t in tiles]
    h, w = rgb[0].shape[:2]
    ncol = min(ncol, len(rgb))
    nrow = -(-len(rgb) // ncol)
    canvas = np.full((nrow * (h + pad) + pad, ncol * (w + pad) + pad, 3), 255, dtype=np.uint8)
    for i, t in enumerate(rgb):
        r, c = divmod(i, ncol)
        canvas[pad + r * (h + pad):pad + r * (h + pad) + h, pad + c * (w + pad):pad + c * (w + pad) + w] = t
    img = Image.fromarray(canvas)
    if scale > 1:
        img = img.resize((img.width * scale, img.height * scale), Image.NEAREST)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    img.save(path)
    return path


def save_pair_grid(images: Sequence[np.ndarray], labels: Sequence[np.ndarray], path, ncol: int = 8,
                   scale: int = 2) -> Path:
    """Image row above its colorized label row, ``ncol`` pairs per band."""
    tiles: List[np.ndarray] = []
    for start in range(0, len(images), ncol):
        chunk = range(start, min(start + ncol, len(images)))
        tiles += [_to_rgb(images[i]) for i in chunk]
        tiles += [colorize(labels[i]) for i in chunk]
    return save_grid(tiles, path, ncol=min(ncol, len(images)), scale=scale)


def plot_series(series: Dict[str, tuple], path, xlabel: str = "step", ylabel: str = "value",
                title: Optional[str] = None, logy: bool = False) -> Path:
    """One line per entry of ``series`` (name -> (xs, ys))."""
    fig, ax = plt.subplots(figsize=(5.0, 3.2), dpi=120)
    for name, (xs, ys) in series.items():
        ax.plot(xs, ys, label=name, lw=1.2, marker="o" if len(xs) < 20 else None, ms=3)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    if logy:
        ax.set_yscale("log")
    if title:
        ax.set_title(title)
    if len(series) > 1:
        ax.legend(fontsize=7, frameon=False)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_bars(labels: Sequence[str], values: Sequence[float], path, ylabel: str = "metric",
              title: Optional[str] = None) -> Path:
    fig, ax = plt.subplots(figsize=(max(4.0, 0.6 * len(labels) + 1.5), 3.2), dpi=120)
    ax.bar(range(len(values)), values, color="#4477aa")
    ax.set_xticks(range(len(labels)))
    ax.set_xticklabels(labels, rotation=30, ha="right", fontsize=7)
    ax.set_ylabel(ylabel)
    ax.set_ylim(0, 1.0 if all(0 <= v <= 1 for v in values) else None)
    if title:
        ax.set_title(title)
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path)
    plt.close(fig)
    return path
