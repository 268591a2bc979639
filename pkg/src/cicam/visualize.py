"""Static composites: input | heatmap | overlay with boxes (predicted green, ground truth red)."""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np
from matplotlib import colormaps
from PIL import Image

from .localizer import BoundingBox

GREEN = np.array([0, 255, 0], dtype=np.uint8)
RED = np.array([255, 0, 0], dtype=np.uint8)


def heatmap_rgb(h_up: np.ndarray) -> np.ndarray:
    lo, hi = float(h_up.min()), float(h_up.max())
    norm = (h_up - lo) / (hi - lo) if hi > lo else np.zeros_like(h_up)
    rgba = colormaps["inferno"](norm)
    return np.round(rgba[..., :3] * 255.0).astype(np.uint8)


def draw_box(canvas: np.ndarray, box: tuple[int, int, int, int], color: np.ndarray, scale: int = 1) -> None:
    """One-pixel outline along the box's outermost pixel rows and columns (scaled)."""
    x0, y0, x1, y1 = (v * scale for v in box)
    canvas[y0, x0:x1] = color
    canvas[y1 - 1, x0:x1] = color
    canvas[y0:y1, x0] = color
    canvas[y0:y1, x1 - 1] = color


def composite(image: np.ndarray, h_up: np.ndarray, pred_box: BoundingBox | tuple, gt_box: tuple | None,
              scale: int = 4, alpha: float = 0.5) -> np.ndarray:
    """``H x 3W`` RGB array; ``image`` is ``3 x H x W`` in [0, 1], ``h_up`` is ``H x W``."""
    rgb = np.round(image.transpose(1, 2, 0) * 255.0).astype(np.uint8)
    heat = heatmap_rgb(h_up)
    blend = np.round((1 - alpha) * rgb.astype(np.float64) + alpha * heat.astype(np.float64)).astype(np.uint8)

    def up(a):
        return np.repeat(np.repeat(a, scale, axis=0), scale, axis=1)

    overlay = up(blend)
    if gt_box is not None:
        draw_box(overlay, tuple(gt_box), RED, scale)
    pb = pred_box.as_tuple() if isinstance(pred_box, BoundingBox) else tuple(pred_box)
    draw_box(overlay, pb, GREEN, scale)
    return np.concatenate([up(rgb), up(heat), overlay], axis=1)


def save_png(array: np.ndarray, path: str | os.PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(array, mode="RGB").save(path, format="PNG", optimize=False)
    return path


def overlay_panel(comp: np.ndarray) -> np.ndarray:
    w = comp.shape[1] // 3
    return comp[:, 2 * w:]


def green_extent(panel: np.ndarray, scale: int = 1) -> tuple[int, int, int, int]:
    """Recover the predicted box (image coordinates) from the green outline pixels."""
    ys, xs = np.nonzero(np.all(panel == GREEN, axis=-1))
    return (int(xs.min()) // scale, int(ys.min()) // scale, int(xs.max()) // scale + 1, int(ys.max()) // scale + 1)
