"""The dual-branch network: backbone, shared CAM head, context pool, enhancement."""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn as nn

from .backbone import Backbone, BackboneConfig
from .cam_head import CamHead, ClassScores, top_class
from .causal_pool import AGGREGATES, ContextPool, Enhancer

DTYPES = {"float32": torch.float32, "float64": torch.float64}


@dataclass
class ModelConfig:
    num_classes: int = 5
    image_size: int = 64
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    pool: bool = True
    lam: float = 0.01
    pool_eps: float = 1e-5
    aggregate: str = "predicted"
    per_channel_enhance: bool = False
    dtype: str = "float32"

    def validate(self) -> None:
        self.backbone.validate()
        if self.num_classes < 2:
            raise ValueError("need at least two classes")
        if self.image_size % self.backbone.stride:
            raise ValueError(f"image size {self.image_size} not divisible by stride {self.backbone.stride}")
        if self.aggregate not in AGGREGATES:
            raise ValueError(f"aggregate must be one of {AGGREGATES}")
        if self.dtype not in DTYPES:
            raise ValueError(f"dtype must be one of {sorted(DTYPES)}")
        if self.lam < 0:
            raise ValueError("update rate must be >= 0")

    @property
    def feature_size(self) -> int:
        return self.image_size // self.backbone.stride


@dataclass
class Output:
    features: torch.Tensor
    scores: ClassScores  # branch 1
    maps: torch.Tensor
    pi: torch.Tensor
    enhanced: torch.Tensor
    scores_e: ClassScores  # branch 2, the final prediction
    maps_e: torch.Tensor


class CICAM(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        config.validate()
        self.config = config
        self.backbone = Backbone(config.backbone)
        self.head = CamHead(self.backbone.out_channels, config.num_classes)
        self.enhancer = Enhancer(self.backbone.out_channels, config.per_channel_enhance)
        # NHWC is markedly faster for these thin convolutions on CPU
        self.to(dtype=DTYPES[config.dtype], memory_format=torch.channels_last)

    def new_pool(self) -> ContextPool:
        s = self.config.feature_size
        return ContextPool(self.config.num_classes, s, s, self.config.lam, self.config.pool_eps,
                           dtype=DTYPES[self.config.dtype])

    # the two CAM branches are one module called twice
    @property
    def branch1(self) -> CamHead:
        return self.head

    @property
    def branch2(self) -> CamHead:
        return self.head

    def forward(self, images: torch.Tensor, pool: ContextPool | None = None, update: bool = False,
                pool_override: torch.Tensor | None = None) -> Output:
        """Run both branches.

        With ``update=True`` the pool absorbs each sample in batch order and that
        sample is enhanced with the slot as it stands right after its own update.
        ``pool_override`` feeds explicit per-sample context maps instead.
        """
        x = self.backbone(images.contiguous(memory_format=torch.channels_last))
        scores, maps = self.branch1(x)
        pi = top_class(scores.probs.detach())
        if pi.ndim == 0:
            pi = pi.reshape(1)
        if pool_override is not None:
            xe = self.enhancer(x, pool_override)
        elif self.config.pool and pool is not None:
            if update:
                ctx = []
                for b in range(x.shape[0]):
                    p = int(pi[b])
                    pool.update_(maps[b], p)
                    ctx.append(pool.context(p, self.config.aggregate).clone())
                context = torch.stack(ctx)
            else:
                context = pool.context(pi, self.config.aggregate)
            xe = self.enhancer(x, context)
        else:
            xe = x
        scores_e, maps_e = self.branch2(xe)
        return Output(x, scores, maps, pi, xe, scores_e, maps_e)


def build_model(config: ModelConfig, seed: int = 0) -> CICAM:
    torch.manual_seed(seed)
    return CICAM(config)
