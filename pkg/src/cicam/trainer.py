"""End-to-end training with the two-branch cross-entropy objective."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .backbone import BackboneConfig
from .cam_head import ClassScores
from .causal_pool import ContextPool
from .checkpoint import load_checkpoint, save_checkpoint
from .datagen import Sample
from .model import CICAM, DTYPES, ModelConfig, build_model

log = logging.getLogger(__name__)


class NonFiniteLoss(RuntimeError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 0.0005
    batch_size: int = 6
    epochs: int = 30
    lam: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.99
    seed: int = 0
    pool: bool = True
    aggregate: str = "predicted"
    per_channel_enhance: bool = False
    num_classes: int = 5
    image_size: int = 64
    stage_channels: list[int] = field(default_factory=lambda: [32, 64, 128])
    nonlocal_after_stage: list[int] = field(default_factory=lambda: [1, 2])
    embed_ratio: int = 2
    dtype: str = "float32"

    def validate(self) -> None:
        if self.learning_rate <= 0 or self.batch_size <= 0 or self.epochs <= 0:
            raise ValueError("learning_rate, batch_size and epochs must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("Adam betas must lie in [0, 1)")
        self.model_config().validate()

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            num_classes=self.num_classes,
            image_size=self.image_size,
            backbone=BackboneConfig(list(self.stage_channels), list(self.nonlocal_after_stage), self.embed_ratio),
            pool=self.pool,
            lam=self.lam,
            aggregate=self.aggregate,
            per_channel_enhance=self.per_channel_enhance,
            dtype=self.dtype,
        )

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown TrainConfig fields: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path: str | os.PathLike) -> "TrainConfig":
        with open(path) as f:
            return cls.from_dict(json.load(f))


def dual_loss(scores: ClassScores, scores_e: ClassScores, labels: torch.Tensor | int) -> torch.Tensor:
    """Per-sample ``-log S[label] - log S_e[label]``."""
    labels = torch.as_tensor(labels, dtype=torch.long)
    n = scores.logits.shape[-1]
    if bool(((labels < 0) | (labels >= n)).any()):
        raise ValueError(f"label out of range [0, {n})")
    if scores.logits.ndim == 1:
        return dual_loss(ClassScores(scores.logits[None], scores.probs[None]),
                         ClassScores(scores_e.logits[None], scores_e.probs[None]), labels.reshape(1))[0]
    ce1 = F.cross_entropy(scores.logits, labels, reduction="none")
    ce2 = F.cross_entropy(scores_e.logits, labels, reduction="none")
    return ce1 + ce2


def make_optimizer(model: CICAM, config: TrainConfig) -> torch.optim.Adam:
    return torch.optim.Adam(model.parameters(), lr=config.learning_rate, betas=(config.beta1, config.beta2))


def stack_batch(samples: Sequence[Sample], dtype: torch.dtype) -> tuple[torch.Tensor, torch.Tensor]:
    images = torch.from_numpy(np.stack([s.image for s in samples])).to(dtype)
    labels = torch.tensor([s.label for s in samples], dtype=torch.long)
    return images, labels


def train_step(model: CICAM, pool: ContextPool, optimizer: torch.optim.Optimizer,
               images: torch.Tensor, labels: torch.Tensor) -> float:
    """One forward (updating the pool per sample) and one Adam step on the mean batch loss."""
    model.train()
    optimizer.zero_grad(set_to_none=True)
    out = model(images, pool, update=True)
    loss = dual_loss(out.scores, out.scores_e, labels).mean()
    if not torch.isfinite(loss):
        raise NonFiniteLoss(
            f"non-finite loss {loss.item()}; logits range "
            f"[{out.scores.logits.min().item():.3g}, {out.scores.logits.max().item():.3g}], "
            f"pool finite={bool(torch.isfinite(pool.Q).all())}"
        )
    loss.backward()
    optimizer.step()
    return loss.item()


def epoch_order(seed: int, epoch: int, count: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(count)


@dataclass
class TrainResult:
    model: CICAM
    pool: ContextPool
    epoch_losses: list[float]
    step_losses: list[float]


def train(config: TrainConfig, samples: Sequence[Sample], out_dir: str | os.PathLike | None = None,
          resume: str | os.PathLike | None = None,
          on_epoch: Callable[[int, float], None] | None = None) -> TrainResult:
    """Train from scratch (or from an epoch checkpoint) over ``config.epochs`` epochs.

    With ``out_dir`` set, writes ``train_log.jsonl`` records and a checkpoint per epoch
    under ``checkpoints/``.
    """
    config.validate()
    if not samples:
        raise ValueError("empty training set")
    dtype = DTYPES[config.dtype]
    start_epoch = 1
    if resume is not None:
        model, pool, meta, optimizer = load_checkpoint(resume, lambda m: make_optimizer(m, config))
        start_epoch = int(meta["epoch"]) + 1
    else:
        model = build_model(config.model_config(), config.seed)
        pool = model.new_pool()
        optimizer = make_optimizer(model, config)

    log_file = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        (out_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
        log_file = open(out_dir / "train_log.jsonl", "a" if resume is not None else "w")

    steps_per_epoch = math.ceil(len(samples) / config.batch_size)
    epoch_losses, step_losses = [], []
    try:
        for epoch in range(start_epoch, config.epochs + 1):
            order = epoch_order(config.seed, epoch, len(samples))
            total = 0.0
            for i in range(steps_per_epoch):
                idx = order[i * config.batch_size:(i + 1) * config.batch_size]
                images, labels = stack_batch([samples[j] for j in idx], dtype)
                loss = train_step(model, pool, optimizer, images, labels)
                total += loss * len(idx)
                step_losses.append(loss)
                if log_file is not None:
                    rec = {"epoch": epoch, "step": (epoch - 1) * steps_per_epoch + i + 1, "loss": loss,
                           "lr": config.learning_rate}
                    log_file.write(json.dumps(rec) + "\n")
            mean = total / len(samples)
            epoch_losses.append(mean)
            log.info("epoch %d mean loss %.5f", epoch, mean)
            if on_epoch is not None:
                on_epoch(epoch, mean)
            if out_dir is not None:
                log_file.flush()
                save_checkpoint(out_dir / "checkpoints" / f"epoch_{epoch:03d}.npz", model, pool, optimizer,
                                epoch=epoch, train_config=dataclasses.asdict(config))
    finally:
        if log_file is not None:
            log_file.close()
    return TrainResult(model, pool, epoch_losses, step_losses)
