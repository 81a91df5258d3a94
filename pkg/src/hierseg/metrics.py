"""Precision, recall, mIoU and dice over the complete / core / enhancing regions."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

REGIONS = ("complete", "core", "enhancing")
COLUMNS = ("precision", "recall", "miou", "dice")


@dataclass(frozen=True)
class Confusion:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


def region_masks(labels) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() > 4):
        raise ValueError("labels must lie in 0..4")
    complete = labels > 0
    core = (labels == 1) | (labels == 3) | (labels == 4)
    return complete, core, labels == 4


def binary_confusion(pred, truth) -> Confusion:
    pred = np.asarray(pred, dtype=bool)
    truth = np.asarray(truth, dtype=bool)
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {truth.shape}")
    tp = int(np.count_nonzero(pred & truth))
    fp = int(np.count_nonzero(pred & ~truth))
    fn = int(np.count_nonzero(~pred & truth))
    return Confusion(tp, fp, fn, pred.size - tp - fp - fn)


def _ratio(num: float, den: float, truth_empty: bool) -> float:
    if den == 0:
        return 1.0 if truth_empty else 0.0
    return num / den


def region_scores(conf: Confusion) -> tuple[float, float, float, float]:
    """(precision, recall, miou, dice) with empty denominators scored 1 when truth is empty."""
    tp, fp, fn = conf.tp, conf.fp, conf.fn
    empty = tp + fn == 0
    return (
        _ratio(tp, tp + fp, empty),
        _ratio(tp, tp + fn, empty),
        _ratio(tp, tp + fp + fn, empty),
        _ratio(2 * tp, 2 * tp + fp + fn, empty),
    )


@dataclass
class RegionScores:
    """3 x 4 table: rows are regions, columns precision / recall / miou / dice."""

    table: np.ndarray

    def __getitem__(self, key: tuple[str, str]) -> float:
        region, column = key
        return float(self.table[REGIONS.index(region), COLUMNS.index(column)])

    def to_csv(self) -> str:
        lines = ["region," + ",".join(COLUMNS)]
        for i, region in enumerate(REGIONS):
            lines.append(region + "," + ",".join(f"{v:.6f}" for v in self.table[i]))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_csv(cls, text: str) -> "RegionScores":
        rows = [ln.split(",") for ln in text.strip().splitlines()]
        if rows[0] != ["region", *COLUMNS]:
            raise ValueError("unexpected score table header")
        table = np.array([[float(v) for v in r[1:]] for r in rows[1:]])
        return cls(table)


def volume_scores(pred_masks: Sequence[np.ndarray], truth_labels) -> np.ndarray:
    """Score one volume: ``pred_masks`` are the predicted (complete, core, enhancing) masks."""
    truth = region_masks(truth_labels)
    return np.array([region_scores(binary_confusion(p, t)) for p, t in zip(pred_masks, truth)])


def eval_table(predictions: Iterable, truths: Iterable) -> RegionScores:
    """Average per-volume scores across volumes.

    Each prediction is either a label volume (values 0..4) or a tuple of the
    three predicted region masks.
    """
    per_volume = []
    for pred, truth in zip(predictions, truths):
        masks = region_masks(pred) if not isinstance(pred, tuple) else pred
        truth = np.asarray(truth)
        if np.shape(masks[0]) != truth.shape:
            raise ValueError("prediction and truth shapes differ")
        per_volume.append(volume_scores(masks, truth))
    if not per_volume:
        raise ValueError("empty evaluation set")
    return RegionScores(np.mean(per_volume, axis=0))
