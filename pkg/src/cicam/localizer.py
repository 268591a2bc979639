"""Localization map -> bounding box, by relative thresholding and the largest blob."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage


class NoForeground(Exception):
    """The thresholded map selects no pixel."""


@dataclass(frozen=True)
class BoundingBox:
    x_min: int
    y_min: int
    x_max: int
    y_max: int

    def __post_init__(self):
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ValueError(f"degenerate box {self.as_tuple()}")

    def as_tuple(self) -> tuple[int, int, int, int]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)

    @property
    def area(self) -> int:
        return (self.x_max - self.x_min) * (self.y_max - self.y_min)

    @classmethod
    def full(cls, height: int, width: int) -> "BoundingBox":
        return cls(0, 0, width, height)


@dataclass
class LocalizerConfig:
    theta: float = 0.0
    connectivity: int = 8

    def validate(self) -> None:
        if not 0.0 <= self.theta < 1.0:
            raise ValueError(f"theta must lie in [0, 1), got {self.theta}")
        if self.connectivity not in (4, 8):
            raise ValueError(f"connectivity must be 4 or 8, got {self.connectivity}")


_STRUCTURES = {
    4: ndimage.generate_binary_structure(2, 1),
    8: ndimage.generate_binary_structure(2, 2),
}


def connected_components(mask: np.ndarray, connectivity: int = 8) -> list[np.ndarray]:
    """Foreground components as sorted arrays of flat raster indices.

    Ordered by size (largest first), then by the smallest raster index.
    """
    mask = np.asarray(mask, dtype=bool)
    labels, count = ndimage.label(mask, structure=_STRUCTURES[connectivity])
    if count == 0:
        return []
    flat = labels.ravel()
    order = np.argsort(flat, kind="stable")
    bounds = np.searchsorted(flat[order], np.arange(1, count + 2))
    comps = [order[bounds[i]:bounds[i + 1]] for i in range(count)]
    comps.sort(key=lambda c: (-len(c), int(c[0])))
    return comps


def component_box(component: np.ndarray, width: int) -> BoundingBox:
    ys, xs = np.divmod(component, width)
    return BoundingBox(int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1)


def upsample(h: torch.Tensor | np.ndarray, size: tuple[int, int]) -> np.ndarray:
    t = torch.as_tensor(h).detach()
    if tuple(t.shape) == tuple(size):
        return t.cpu().numpy()
    up = F.interpolate(t[None, None], size=size, mode="bilinear", align_corners=False)
    return up[0, 0].cpu().numpy()


def foreground_mask(h_up: np.ndarray, theta: float) -> np.ndarray:
    peak = h_up.max()
    if not peak > 0:
        return np.zeros(h_up.shape, dtype=bool)
    return h_up > theta * peak


def segment_box(h: torch.Tensor | np.ndarray, image_size: int | tuple[int, int],
                config: LocalizerConfig | None = None) -> BoundingBox:
    """Upsample ``h`` bilinearly to the image, threshold at ``theta * max``, box the largest blob.

    Raises :class:`NoForeground` when nothing exceeds the threshold (including ``max(h) <= 0``).
    """
    config = config or LocalizerConfig()
    config.validate()
    size = (image_size, image_size) if isinstance(image_size, int) else tuple(image_size)
    h_arr = torch.as_tensor(h)
    if not torch.isfinite(h_arr).all():
        raise ValueError("localization map is not finite")
    if h_arr.shape[0] > size[0] or h_arr.shape[1] > size[1]:
        raise ValueError(f"map {tuple(h_arr.shape)} larger than image {size}")
    mask = foreground_mask(upsample(h_arr, size), config.theta)
    comps = connected_components(mask, config.connectivity)
    if not comps:
        raise NoForeground("thresholded localization map is empty")
    return component_box(comps[0], size[1])
