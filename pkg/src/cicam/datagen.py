"""Synthetic confounded localization scenes.

Each image holds one solid-coloured foreground shape (the object) drawn over a
grating texture (the context).  In the training split the texture is tied to
the class with probability ``cooccurrence_rate``, so a classifier can score
well by looking at the background alone.  The test split defaults to an
unconfounded coupling of ``1/n``.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

SHAPES = ("disk", "square", "triangle", "cross", "ring", "diamond", "hbar", "vbar")

# solid RGB hues per shape; pure red/green are reserved for box overlays
SHAPE_COLORS = np.array(
    [
        (230, 60, 40),
        (40, 90, 220),
        (240, 200, 30),
        (170, 50, 200),
        (30, 200, 200),
        (250, 130, 20),
        (120, 220, 60),
        (220, 60, 150),
    ],
    dtype=np.float64,
) / 255.0

# (orientation in degrees, cycles per image side)
TEXTURES = tuple((angle, freq) for freq in (3.0, 7.0) for angle in (0.0, 45.0, 90.0, 135.0))

SPLITS = {"train": 0, "test": 1}


@dataclass(frozen=True)
class SceneSpec:
    image_size: int = 64
    num_classes: int = 5
    cooccurrence_rate: float = 0.95
    # (min, max) side of the shape's bounding square, as a fraction of image side
    foreground_scale: tuple[float, float] = (0.25, 0.5)
    seed: int = 0

    def validate(self) -> None:
        if not 0.0 <= self.cooccurrence_rate <= 1.0:
            raise ValueError(f"cooccurrence_rate must lie in [0, 1], got {self.cooccurrence_rate}")
        if self.num_classes < 2:
            raise ValueError(f"need at least 2 classes, got {self.num_classes}")
        if self.num_classes > min(len(SHAPES), len(TEXTURES)):
            raise ValueError(
                f"{self.num_classes} classes exceed the shape/texture inventory "
                f"({min(len(SHAPES), len(TEXTURES))})"
            )
        lo, hi = self.foreground_scale
        if not 0.2 <= lo <= hi <= 0.6:
            raise ValueError(f"foreground_scale must satisfy 0.2 <= lo <= hi <= 0.6, got {self.foreground_scale}")
        if self.image_size < 16:
            raise ValueError(f"image_size too small: {self.image_size}")


@dataclass
class Sample:
    image: np.ndarray  # 3 x H x W float32 in [0, 1]
    label: int
    gt_box: tuple[int, int, int, int]  # x_min, y_min, x_max, y_max (half-open)
    background: int = field(default=-1)


def shape_mask(kind: str, size: int, extent: int) -> np.ndarray:
    """Boolean ``extent x extent`` mask of a shape inscribed in a ``size`` square at the origin."""
    ys, xs = np.mgrid[0:extent, 0:extent].astype(np.float64) + 0.5
    u = xs / size * 2.0 - 1.0  # [-1, 1] across the bounding square
    v = ys / size * 2.0 - 1.0
    inside = (np.abs(u) <= 1.0) & (np.abs(v) <= 1.0)
    r = np.hypot(u, v)
    if kind == "disk":
        m = r <= 1.0
    elif kind == "square":
        m = inside
    elif kind == "triangle":
        # apex at top centre, base along the bottom edge
        m = inside & (np.abs(u) <= (v + 1.0) / 2.0)
    elif kind == "cross":
        m = inside & ((np.abs(u) <= 0.3) | (np.abs(v) <= 0.3))
    elif kind == "ring":
        m = (r <= 1.0) & (r >= 0.55)
    elif kind == "diamond":
        m = np.abs(u) + np.abs(v) <= 1.0
    elif kind == "hbar":
        m = inside & (np.abs(v) <= 0.4)
    elif kind == "vbar":
        m = inside & (np.abs(u) <= 0.4)
    else:
        raise ValueError(f"unknown shape {kind!r}")
    return m


def render_texture(texture_id: int, size: int, rng: np.random.Generator) -> np.ndarray:
    angle, freq = TEXTURES[texture_id]
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    t = np.deg2rad(angle)
    phase = rng.uniform(0.0, 2.0 * np.pi)
    proj = (xs * np.cos(t) + ys * np.sin(t)) / size
    g = 0.5 + 0.3 * np.sin(2.0 * np.pi * freq * proj + phase)
    g = g + rng.normal(0.0, 0.03, size=g.shape)
    return np.repeat(g[None], 3, axis=0)


def _pick_background(label: int, n: int, rho: float, rng: np.random.Generator) -> int:
    if rng.random() < rho:
        return label
    other = int(rng.integers(0, n - 1))
    return other if other < label else other + 1


def render_sample(spec: SceneSpec, label: int, rho: float, rng: np.random.Generator) -> Sample:
    size = spec.image_size
    background = _pick_background(label, spec.num_classes, rho, rng)
    img = render_texture(background, size, rng)

    lo, hi = spec.foreground_scale
    side = int(round(rng.uniform(lo, hi) * size))
    side = max(4, min(side, size))
    x0 = int(rng.integers(0, size - side + 1))
    y0 = int(rng.integers(0, size - side + 1))

    mask = np.zeros((size, size), dtype=bool)
    mask[y0 : y0 + side, x0 : x0 + side] = shape_mask(SHAPES[label], side, side)
    img[:, mask] = SHAPE_COLORS[label][:, None]

    img = np.clip(img, 0.0, 1.0)
    # quantize so in-memory samples equal their lossless on-disk copies
    img = np.round(img * 255.0).astype(np.uint8).astype(np.float32) / 255.0

    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    box = (int(cols[0]), int(rows[0]), int(cols[-1]) + 1, int(rows[-1]) + 1)
    return Sample(image=img, label=label, gt_box=box, background=background)


def generate_dataset(spec: SceneSpec, count: int, split: str = "train", rho: float | None = None) -> list[Sample]:
    """Render ``count`` samples; labels cycle through the classes in a seeded random order.

    The test split uses ``rho = 1/n`` unless ``rho`` is given explicitly.
    """
    if count <= 0:
        raise ValueError(f"count must be >= 1, got {count}")
    if split not in SPLITS:
        raise ValueError(f"split must be one of {sorted(SPLITS)}, got {split!r}")
    spec.validate()
    if rho is None:
        rho = spec.cooccurrence_rate if split == "train" else 1.0 / spec.num_classes
    if not 0.0 <= rho <= 1.0:
        raise ValueError(f"rho must lie in [0, 1], got {rho}")

    split_code = SPLITS[split]
    label_rng = np.random.default_rng([spec.seed, split_code, 2**31 - 1])
    labels = label_rng.integers(0, spec.num_classes, size=count)
    samples = []
    for i, label in enumerate(labels):
        rng = np.random.default_rng([spec.seed, split_code, i])
        samples.append(render_sample(spec, int(label), rho, rng))
    return samples


def write_dataset(samples: list[Sample], root: str | os.PathLike) -> Path:
    """Write ``manifest.json`` plus one PNG per sample."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    entries = []
    for i, s in enumerate(samples):
        name = f"images/{i:06d}.png"
        pixels = np.round(s.image.transpose(1, 2, 0) * 255.0).astype(np.uint8)
        Image.fromarray(pixels, mode="RGB").save(root / name, format="PNG", optimize=False)
        entries.append({"file": name, "label": int(s.label), "gt_box": [int(v) for v in s.gt_box]})
    with open(root / "manifest.json", "w") as f:
        json.dump(entries, f, indent=1)
        f.write("\n")
    return root


def read_dataset(root: str | os.PathLike) -> list[Sample]:
    root = Path(root)
    manifest = root / "manifest.json"
    if not manifest.exists():
        raise FileNotFoundError(f"no manifest.json under {root}")
    with open(manifest) as f:
        entries = json.load(f)
    samples = []
    for e in entries:
        if "gt_box" not in e:
            raise ValueError(f"manifest entry {e.get('file')} has no gt_box")
        pixels = np.asarray(Image.open(root / e["file"]).convert("RGB"))
        img = pixels.transpose(2, 0, 1).astype(np.float32) / 255.0
        samples.append(Sample(image=img, label=int(e["label"]), gt_box=tuple(int(v) for v in e["gt_box"])))
    return samples
