"""Rank class activation maps by score and fold them into one localization map."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

GAMMA_KINDS = ("top1", "linear-decay", "nlccam-bipolar")


@dataclass
class CombinerConfig:
    gamma_kind: str = "nlccam-bipolar"
    # nlccam-bipolar: fraction of top ranks weighted +1, fraction of bottom ranks
    # weighted negatively, and the magnitude of the negative weights
    top_frac: float = 0.1
    bottom_frac: float = 0.1
    scale: float = 1.0
    # explicit per-rank weights; overrides gamma_kind when set
    weights: tuple[float, ...] | None = None

    def validate(self) -> None:
        if self.weights is None and self.gamma_kind not in GAMMA_KINDS:
            raise ValueError(f"gamma_kind must be one of {GAMMA_KINDS}, got {self.gamma_kind!r}")
        if not (0.0 <= self.top_frac <= 1.0 and 0.0 <= self.bottom_frac <= 1.0):
            raise ValueError("top_frac and bottom_frac must lie in [0, 1]")


def gamma_weights(config: CombinerConfig, n: int) -> np.ndarray:
    """Weights ``gamma(k)`` for rank positions ``k = 1..n`` (index 0 is the top class)."""
    config.validate()
    if config.weights is not None:
        w = np.asarray(config.weights, dtype=np.float64)
        if w.shape != (n,):
            raise ValueError(f"expected {n} explicit weights, got {w.shape}")
    elif config.gamma_kind == "top1":
        w = np.zeros(n)
        w[0] = 1.0
    elif config.gamma_kind == "linear-decay":
        w = (n - 1 - np.arange(n)) / max(n - 1, 1)
    else:
        n_top = min(n, max(1, math.ceil(n * config.top_frac)))
        n_bottom = min(n - n_top, math.ceil(n * config.bottom_frac))
        w = np.zeros(n)
        w[:n_top] = 1.0
        if n_bottom:
            w[n - n_bottom:] = -config.scale / (n - n_top)
    if not np.all(np.isfinite(w)):
        raise ValueError("gamma weights are not finite")
    return w


def rank_order(probs: torch.Tensor | np.ndarray) -> np.ndarray:
    """Class ids from highest to lowest probability; ties keep the lower id first."""
    p = probs.detach().cpu().numpy() if isinstance(probs, torch.Tensor) else np.asarray(probs)
    return np.argsort(-p, kind="stable")


def rank_maps(maps: torch.Tensor, probs: torch.Tensor) -> list[tuple[int, torch.Tensor]]:
    if maps.shape[0] != probs.shape[-1]:
        raise ValueError(f"{maps.shape[0]} maps but {probs.shape[-1]} scores")
    return [(int(c), maps[c]) for c in rank_order(probs)]


def combine(ranked: list[tuple[int, torch.Tensor]], config: CombinerConfig) -> torch.Tensor:
    """``H = sum_k gamma(k) * M_{t_k}`` over a complete ranked list."""
    n = len(ranked)
    ids = sorted(c for c, _ in ranked)
    if ids != list(range(n)):
        raise ValueError(f"ranked maps incomplete: got classes {ids}")
    w = gamma_weights(config, n)
    stack = torch.stack([m for _, m in ranked])
    return torch.einsum("k,khw->hw", torch.as_tensor(w, dtype=stack.dtype), stack)


def localization_map(maps: torch.Tensor, probs: torch.Tensor, config: CombinerConfig) -> torch.Tensor:
    return combine(rank_maps(maps, probs), config)
