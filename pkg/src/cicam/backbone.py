"""Small fully convolutional feature extractor with non-local blocks."""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass
class BackboneConfig:
    stage_channels: list[int] = field(default_factory=lambda: [32, 64, 128])
    # 0-based stage indices whose output passes through a non-local block
    nonlocal_after_stage: list[int] = field(default_factory=lambda: [1, 2])
    embed_ratio: int = 2

    def validate(self) -> None:
        if len(self.stage_channels) < 2:
            raise ValueError("backbone needs at least two stages")
        if any(c <= 0 for c in self.stage_channels):
            raise ValueError(f"stage channels must be positive: {self.stage_channels}")
        for i in self.nonlocal_after_stage:
            if not 0 <= i < len(self.stage_channels):
                raise ValueError(f"non-local stage index {i} out of range")
        if self.embed_ratio < 1:
            raise ValueError("embed_ratio must be >= 1")

    @property
    def stride(self) -> int:
        return 2 ** len(self.stage_channels)


class NonLocalBlock(nn.Module):
    """Embedded dot-product non-local block, ``y = x + norm(proj(attn(x)))``.

    The output normalization starts with zero scale and shift, so a freshly
    built block is an exact identity.
    """

    def __init__(self, channels: int, embed_ratio: int = 2):
        super().__init__()
        inner = max(1, channels // embed_ratio)
        self.theta = nn.Conv2d(channels, inner, 1)
        self.phi = nn.Conv2d(channels, inner, 1)
        self.g = nn.Conv2d(channels, inner, 1)
        self.proj = nn.Conv2d(inner, channels, 1)
        self.norm = nn.GroupNorm(1, channels)
        nn.init.zeros_(self.norm.weight)
        nn.init.zeros_(self.norm.bias)

    def attention(self, x: torch.Tensor) -> torch.Tensor:
        """Row-stochastic ``B x N x N`` affinity over the ``N = h*w`` positions."""
        q = self.theta(x).flatten(2)  # B x d x N
        k = self.phi(x).flatten(2)
        return torch.softmax(q.transpose(1, 2) @ k, dim=-1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, _, h, w = x.shape
        attn = self.attention(x)
        v = self.g(x).flatten(2)  # B x d x N
        y = (v @ attn.transpose(1, 2)).reshape(b, -1, h, w)
        return x + self.norm(self.proj(y))


class Backbone(nn.Module):
    """Stages of conv-relu-conv-relu-maxpool, each halving the resolution."""

    def __init__(self, config: BackboneConfig | None = None, in_channels: int = 3):
        super().__init__()
        self.config = config = config or BackboneConfig()
        config.validate()
        stages = []
        nonlocal_blocks = {}
        prev = in_channels
        for i, ch in enumerate(config.stage_channels):
            stages.append(
                nn.Sequential(
                    nn.Conv2d(prev, ch, 3, padding=1),
                    nn.ReLU(),
                    nn.Conv2d(ch, ch, 3, padding=1),
                    nn.ReLU(),
                    nn.MaxPool2d(2),
                )
            )
            if i in config.nonlocal_after_stage:
                nonlocal_blocks[str(i)] = NonLocalBlock(ch, config.embed_ratio)
            prev = ch
        self.stages = nn.ModuleList(stages)
        self.nonlocal_blocks = nn.ModuleDict(nonlocal_blocks)
        self.out_channels = prev

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        stride = self.config.stride
        if images.shape[-1] % stride or images.shape[-2] % stride:
            raise ValueError(f"image size {tuple(images.shape[-2:])} not divisible by total stride {stride}")
        x = images
        for i, stage in enumerate(self.stages):
            x = stage(x)
            key = str(i)
            if key in self.nonlocal_blocks:
                x = self.nonlocal_blocks[key](x)
        return x


def extract_features(image: torch.Tensor, backbone: Backbone) -> torch.Tensor:
    """Single-image convenience wrapper: ``3 x H x W`` in, ``c x h x w`` out."""
    return backbone(image.unsqueeze(0)).squeeze(0)


def non_local_block(x: torch.Tensor, block: NonLocalBlock) -> torch.Tensor:
    if not torch.isfinite(x).all():
        raise ValueError("non-local block input is not finite")
    return block(x.unsqueeze(0)).squeeze(0)
