"""Desk-scale confounding experiment and the lambda / theta ablation harnesses.

The confounding run trains the same network with and without the context pool
on scenes whose background texture co-occurs with the class, then scores both
on an unconfounded test split.
"""

from __future__ import annotations

import dataclasses
import logging
import statistics
import time
from dataclasses import dataclass, field
from typing import Sequence

import torch

from .combiner import CombinerConfig
from .datagen import SceneSpec, generate_dataset
from .evaluator import MetricReport, evaluate, predict, theta_sweep
from .localizer import LocalizerConfig
from .trainer import TrainConfig, TrainResult, train

log = logging.getLogger(__name__)

LAMBDA_GRID = (0.001, 0.002, 0.005, 0.01, 0.02, 0.04, 0.08)
THETA_GRID = tuple(round(0.05 * i, 2) for i in range(7))  # 0.0 .. 0.3


@dataclass
class ConfoundingConfig:
    num_classes: int = 5
    image_size: int = 64
    train_rho: float = 0.95
    test_rho: float = 0.2
    train_count: int = 2000
    test_count: int = 1000
    epochs: int = 30
    seeds: tuple[int, ...] = (0, 1, 2)
    # desk-scale model; see README for why these differ from the TrainConfig defaults
    batch_size: int = 32
    learning_rate: float = 0.0005
    lam: float = 0.01
    stage_channels: list[int] = field(default_factory=lambda: [4, 16, 32])
    nonlocal_after_stage: list[int] = field(default_factory=lambda: [2])
    theta: float = 0.0
    report_thetas: tuple[float, ...] = (0.0, 0.1, 0.2, 0.3, 0.4, 0.5)
    combiner: CombinerConfig = field(default_factory=CombinerConfig)

    def train_config(self, seed: int, pool: bool) -> TrainConfig:
        return TrainConfig(
            learning_rate=self.learning_rate,
            batch_size=self.batch_size,
            epochs=self.epochs,
            lam=self.lam,
            seed=seed,
            pool=pool,
            num_classes=self.num_classes,
            image_size=self.image_size,
            stage_channels=list(self.stage_channels),
            nonlocal_after_stage=list(self.nonlocal_after_stage),
        )

    def datasets(self, seed: int):
        train_spec = SceneSpec(self.image_size, self.num_classes, self.train_rho, seed=seed)
        return (generate_dataset(train_spec, self.train_count, "train"),
                generate_dataset(train_spec, self.test_count, "test", rho=self.test_rho))


@dataclass
class ArmResult:
    seed: int
    pool: bool
    report: MetricReport
    sweep: list[dict]
    train_seconds: float
    final_loss: float
    result: TrainResult | None = None


@dataclass
class ConfoundingOutcome:
    arms: list[ArmResult]
    median_gtknown_pool: float
    median_gtknown_base: float
    median_cls_pool: float
    median_cls_base: float
    seconds: float

    @property
    def loc_margin(self) -> float:
        return self.median_gtknown_pool - self.median_gtknown_base

    @property
    def cls_drop(self) -> float:
        return self.median_cls_base - self.median_cls_pool

    def summary(self) -> dict:
        return {
            "median_gtknown_pool": self.median_gtknown_pool,
            "median_gtknown_base": self.median_gtknown_base,
            "loc_margin": self.loc_margin,
            "median_top1_cls_pool": self.median_cls_pool,
            "median_top1_cls_base": self.median_cls_base,
            "cls_drop": self.cls_drop,
            "seconds": self.seconds,
            "runs": [
                {"seed": a.seed, "pool": a.pool, "final_loss": a.final_loss, "train_seconds": a.train_seconds,
                 **a.report.to_dict(),
                 "gtknown_by_theta": {r["theta"]: r["gtknown_loc"] for r in a.sweep}}
                for a in self.arms
            ],
        }


def run_confounding(config: ConfoundingConfig | None = None, keep_models: bool = False) -> ConfoundingOutcome:
    config = config or ConfoundingConfig()
    start = time.time()
    arms = []
    for seed in config.seeds:
        train_set, test_set = config.datasets(seed)
        for pool in (True, False):
            t0 = time.time()
            result = train(config.train_config(seed, pool), train_set)
            elapsed = time.time() - t0
            report, _ = evaluate(result.model, result.pool, test_set, LocalizerConfig(config.theta), config.combiner)
            sweep = theta_sweep(predict(result.model, result.pool, test_set), test_set, config.report_thetas,
                                config.combiner)
            log.info("seed %d pool=%s gtknown=%.4f top1_cls=%.4f (%.0fs)", seed, pool, report.gtknown_loc,
                     report.top1_cls, elapsed)
            arms.append(ArmResult(seed, pool, report, sweep, elapsed, result.epoch_losses[-1],
                                  result if keep_models else None))

    def med(pool, attr):
        return statistics.median(getattr(a.report, attr) for a in arms if a.pool == pool)

    return ConfoundingOutcome(arms, med(True, "gtknown_loc"), med(False, "gtknown_loc"),
                              med(True, "top1_cls"), med(False, "top1_cls"), time.time() - start)


def lambda_sweep(base: TrainConfig, train_set, test_set, lambdas: Sequence[float] = LAMBDA_GRID,
                 loc: LocalizerConfig | None = None, comb: CombinerConfig | None = None) -> list[dict]:
    """Retrain once per update rate; one row per rate (the update-rate ablation table)."""
    rows = []
    for lam in lambdas:
        result = train(dataclasses.replace(base, lam=lam, pool=True), train_set)
        report, _ = evaluate(result.model, result.pool, test_set, loc, comb)
        rows.append({"lambda": lam, **report.to_dict()})
    return rows


def theta_table(result: TrainResult, test_set, thetas: Sequence[float] = THETA_GRID,
                comb: CombinerConfig | None = None) -> list[dict]:
    with torch.no_grad():
        preds = predict(result.model, result.pool, test_set)
    return theta_sweep(preds, test_set, thetas, comb or CombinerConfig())
