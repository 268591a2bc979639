"""Classification and localization accuracy (Top-1/Top-5, GT-known) plus IoU."""

from __future__ import annotations

import csv
import dataclasses
import json
import os
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from .causal_pool import ContextPool
from .combiner import CombinerConfig, localization_map, rank_order
from .datagen import Sample
from .localizer import BoundingBox, LocalizerConfig, NoForeground, segment_box
from .model import CICAM, DTYPES

IOU_THRESHOLD = 0.5
TOP5_MODES = ("single-box", "per-class")


def iou(a: BoundingBox | Sequence[int], b: BoundingBox | Sequence[int]) -> float:
    ax0, ay0, ax1, ay1 = a.as_tuple() if isinstance(a, BoundingBox) else a
    bx0, by0, bx1, by1 = b.as_tuple() if isinstance(b, BoundingBox) else b
    iw = max(0, min(ax1, bx1) - max(ax0, bx0))
    ih = max(0, min(ay1, by1) - max(ay0, by0))
    inter = iw * ih
    union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter
    return inter / union


@dataclass
class MetricReport:
    top1_cls: float
    top5_cls: float
    top1_loc: float
    top5_loc: float
    gtknown_loc: float
    counts: int
    noforeground_count: int

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self, path: str | os.PathLike) -> None:
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=False)
            f.write("\n")

    def check_invariants(self) -> None:
        assert self.top1_cls <= self.top5_cls
        assert self.top1_loc <= self.top5_loc
        assert self.top1_loc <= min(self.top1_cls, self.gtknown_loc)


@dataclass
class SampleRecord:
    id: int
    label: int
    pred_class: int
    topk: tuple[int, ...]
    box: tuple[int, int, int, int]
    iou: float
    noforeground: bool = False
    # IoU of the box built for the true class; only set in per-class top-5 mode
    label_iou: float | None = None

    @property
    def correct_top1_cls(self) -> bool:
        return self.pred_class == self.label

    @property
    def correct_top5_cls(self) -> bool:
        return self.label in self.topk

    @property
    def correct_gtknown_loc(self) -> bool:
        return self.iou >= IOU_THRESHOLD

    @property
    def correct_top1_loc(self) -> bool:
        return self.correct_top1_cls and self.correct_gtknown_loc

    @property
    def correct_top5_loc(self) -> bool:
        loc = self.iou if self.label_iou is None else self.label_iou
        return self.correct_top5_cls and loc >= IOU_THRESHOLD


def tally(records: Sequence[SampleRecord]) -> MetricReport:
    if not records:
        raise ValueError("no records to tally")
    n = len(records)

    def frac(attr):
        return sum(getattr(r, attr) for r in records) / n

    return MetricReport(
        top1_cls=frac("correct_top1_cls"),
        top5_cls=frac("correct_top5_cls"),
        top1_loc=frac("correct_top1_loc"),
        top5_loc=frac("correct_top5_loc"),
        gtknown_loc=frac("correct_gtknown_loc"),
        counts=n,
        noforeground_count=sum(r.noforeground for r in records),
    )


def write_records_csv(records: Sequence[SampleRecord], path: str | os.PathLike) -> None:
    fields = ["id", "label", "pred_class", "iou", "x_min", "y_min", "x_max", "y_max", "noforeground",
              "correct_top1_cls", "correct_top5_cls", "correct_top1_loc", "correct_top5_loc", "correct_gtknown_loc"]
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(fields)
        for r in records:
            w.writerow([r.id, r.label, r.pred_class, repr(r.iou), *r.box, int(r.noforeground),
                        int(r.correct_top1_cls), int(r.correct_top5_cls), int(r.correct_top1_loc),
                        int(r.correct_top5_loc), int(r.correct_gtknown_loc)])


@dataclass
class Prediction:
    """Branch-2 output for one image: final class scores and class maps."""
    probs: torch.Tensor
    maps: torch.Tensor


@torch.no_grad()
def predict(model: CICAM, pool: ContextPool, samples: Sequence[Sample], batch_size: int = 64) -> list[Prediction]:
    """Forward without touching the pool; the context slot comes from branch 1's prediction."""
    model.eval()
    dtype = DTYPES[model.config.dtype]
    preds = []
    for i in range(0, len(samples), batch_size):
        chunk = samples[i:i + batch_size]
        images = torch.from_numpy(np.stack([s.image for s in chunk])).to(dtype)
        out = model(images, pool, update=False)
        for b in range(len(chunk)):
            preds.append(Prediction(out.scores_e.probs[b].clone(), out.maps_e[b].clone()))
    return preds


def _box(h: torch.Tensor, size: tuple[int, int], loc: LocalizerConfig) -> tuple[BoundingBox, bool]:
    try:
        return segment_box(h, size, loc), False
    except NoForeground:
        return BoundingBox.full(*size), True


def score_predictions(preds: Sequence[Prediction], samples: Sequence[Sample], loc: LocalizerConfig,
                      comb: CombinerConfig, top5_mode: str = "single-box") -> list[SampleRecord]:
    if top5_mode not in TOP5_MODES:
        raise ValueError(f"top5_mode must be one of {TOP5_MODES}")
    records = []
    for i, (p, s) in enumerate(zip(preds, samples)):
        if s.gt_box is None:
            raise ValueError(f"sample {i} has no ground-truth box")
        size = s.image.shape[-2:]
        order = rank_order(p.probs)
        topk = tuple(int(c) for c in order[:5])
        box, empty = _box(localization_map(p.maps, p.probs, comb), size, loc)
        label_iou = None
        if top5_mode == "per-class" and s.label in topk:
            # put the true class first, keep the others in score order
            probs = p.probs.clone()
            probs[s.label] = probs.max() + 1.0
            label_box, _ = _box(localization_map(p.maps, probs, comb), size, loc)
            label_iou = iou(label_box, s.gt_box)
        records.append(SampleRecord(i, s.label, topk[0], topk, box.as_tuple(), iou(box, s.gt_box), empty, label_iou))
    return records


def evaluate(model: CICAM, pool: ContextPool, samples: Sequence[Sample], loc: LocalizerConfig | None = None,
             comb: CombinerConfig | None = None, top5_mode: str = "single-box",
             batch_size: int = 64) -> tuple[MetricReport, list[SampleRecord]]:
    loc = loc or LocalizerConfig()
    comb = comb or CombinerConfig()
    records = score_predictions(predict(model, pool, samples, batch_size), samples, loc, comb, top5_mode)
    return tally(records), records


def theta_sweep(preds: Sequence[Prediction], samples: Sequence[Sample], thetas: Sequence[float],
                comb: CombinerConfig, connectivity: int = 8) -> list[dict]:
    """One row per threshold: the metric report plus the mean predicted-box area."""
    rows = []
    for theta in thetas:
        records = score_predictions(preds, samples, LocalizerConfig(theta, connectivity), comb)
        row = {"theta": float(theta), **tally(records).to_dict()}
        row["mean_box_area"] = float(np.mean([(r.box[2] - r.box[0]) * (r.box[3] - r.box[1]) for r in records]))
        rows.append(row)
    return rows
