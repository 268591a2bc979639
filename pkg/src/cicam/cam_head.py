"""GAP + linear classifier and class activation maps."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn


@dataclass
class ClassScores:
    logits: torch.Tensor  # (..., n)
    probs: torch.Tensor


class CamHead(nn.Module):
    """Classifier weights ``W (n x c)`` and bias ``b (n)``.

    The full network calls the same instance for both branches, which is how
    the two CAM modules share their weights.
    """

    def __init__(self, in_channels: int, num_classes: int):
        super().__init__()
        self.fc = nn.Linear(in_channels, num_classes)

    @property
    def weight(self) -> torch.Tensor:
        return self.fc.weight

    @property
    def bias(self) -> torch.Tensor:
        return self.fc.bias

    def forward(self, x: torch.Tensor) -> tuple[ClassScores, torch.Tensor]:
        return classify(x, self.weight, self.bias), compute_cams(x, self.weight)


def _check(x: torch.Tensor, weight: torch.Tensor) -> None:
    if x.shape[-3] != weight.shape[1]:
        raise ValueError(f"feature channels {x.shape[-3]} do not match classifier input {weight.shape[1]}")


def classify(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None = None) -> ClassScores:
    """``logits = W @ GAP(x) + b`` for ``x`` of shape ``(..., c, h, w)``."""
    _check(x, weight)
    pooled = x.mean(dim=(-2, -1))
    logits = pooled @ weight.T
    if bias is not None:
        logits = logits + bias
    return ClassScores(logits=logits, probs=torch.softmax(logits, dim=-1))


def compute_cams(x: torch.Tensor, weight: torch.Tensor) -> torch.Tensor:
    """Per-class maps ``M_i = sum_k W[i, k] * x[k]``; the bias is not part of a CAM."""
    _check(x, weight)
    return torch.einsum("nc,...chw->...nhw", weight, x)


def top_class(probs: torch.Tensor) -> torch.Tensor | int:
    """Argmax over the last axis; ties resolve to the lowest index."""
    # torch.argmax returns the first maximal index
    idx = torch.argmax(probs, dim=-1)
    return int(idx) if idx.ndim == 0 else idx
