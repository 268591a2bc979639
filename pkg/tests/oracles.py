"""Brute-force reference implementations, deliberately independent of the package."""

from collections import deque

import numpy as np
import torch


def bfs_components(mask, connectivity):
    """Flood fill; returns a set of frozensets of (row, col)."""
    mask = np.asarray(mask, dtype=bool)
    h, w = mask.shape
    if connectivity == 4:
        steps = [(-1, 0), (1, 0), (0, -1), (0, 1)]
    else:
        steps = [(dy, dx) for dy in (-1, 0, 1) for dx in (-1, 0, 1) if (dy, dx) != (0, 0)]
    seen = np.zeros_like(mask)
    comps = []
    for y in range(h):
        for x in range(w):
            if not mask[y, x] or seen[y, x]:
                continue
            comp = []
            queue = deque([(y, x)])
            seen[y, x] = True
            while queue:
                cy, cx = queue.popleft()
                comp.append((cy, cx))
                for dy, dx in steps:
                    ny, nx = cy + dy, cx + dx
                    if 0 <= ny < h and 0 <= nx < w and mask[ny, nx] and not seen[ny, nx]:
                        seen[ny, nx] = True
                        queue.append((ny, nx))
            comps.append(frozenset(comp))
    return comps


def largest_box(mask, connectivity):
    """Tight half-open box of the largest component; ties go to the smaller first raster pixel."""
    comps = bfs_components(mask, connectivity)
    if not comps:
        return None
    w = np.asarray(mask).shape[1]
    best = min(comps, key=lambda c: (-len(c), min(y * w + x for y, x in c)))
    ys = [p[0] for p in best]
    xs = [p[1] for p in best]
    return (min(xs), min(ys), max(xs) + 1, max(ys) + 1)


def pixel_iou(a, b):
    """IoU by enumerating every pixel of both boxes."""
    pa = {(x, y) for x in range(a[0], a[2]) for y in range(a[1], a[3])}
    pb = {(x, y) for x in range(b[0], b[2]) for y in range(b[1], b[3])}
    return len(pa & pb) / len(pa | pb)


def bilinear_upsample(h, out_h, out_w):
    """Half-pixel-centre bilinear resize with edge clamping, written out per output pixel."""
    h = np.asarray(h, dtype=np.float64)
    in_h, in_w = h.shape
    out = np.empty((out_h, out_w))
    for i in range(out_h):
        sy = max((i + 0.5) * in_h / out_h - 0.5, 0.0)
        y0 = min(int(np.floor(sy)), in_h - 1)
        y1 = min(y0 + 1, in_h - 1)
        fy = sy - y0
        for j in range(out_w):
            sx = max((j + 0.5) * in_w / out_w - 0.5, 0.0)
            x0 = min(int(np.floor(sx)), in_w - 1)
            x1 = min(x0 + 1, in_w - 1)
            fx = sx - x0
            top = h[y0, x0] * (1 - fx) + h[y0, x1] * fx
            bot = h[y1, x0] * (1 - fx) + h[y1, x1] * fx
            out[i, j] = top * (1 - fy) + bot * fy
    return out


def central_difference(f, param, index, eps=1e-5):
    """(f(p + eps) - f(p - eps)) / 2eps for one entry of ``param`` (a tuple index)."""
    with torch.no_grad():
        orig = param[index].item()
        param[index] = orig + eps
        plus = float(f())
        param[index] = orig - eps
        minus = float(f())
        param[index] = orig
    return (plus - minus) / (2 * eps)
