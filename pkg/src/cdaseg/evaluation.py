"""Confusion-matrix accumulation and intersection-over-union metrics.

Counts are accumulated over the whole test set before any ratio is taken;
per class, IoU = TP / (TP + FP + FN).  Pixels whose ground truth is void
are never scored.  A prediction may itself contain void pixels (e.g. when
only landmark superpixels are painted); those count against the truth
class as misses but are not attributed to any predicted class.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .parallel import map_ordered
from .raster import Dataset, LabelMask

IOU_UNDEFINED = -1.0


@dataclass
class ConfusionCounts:
    """C x C pixel tally (rows = truth, cols = prediction).

    ``missed`` holds predicted-void pixels per truth class;
    ``void_skipped`` counts pixels whose truth itself is void.
    """

    matrix: np.ndarray
    void_skipped: int = 0
    missed: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.int64)
        if self.missed is None:
            self.missed = np.zeros(self.matrix.shape[0], dtype=np.int64)

    @classmethod
    def zeros(cls, num_classes: int) -> "ConfusionCounts":
        return cls(np.zeros((num_classes, num_classes), dtype=np.int64))

    @property
    def num_classes(self) -> int:
        return self.matrix.shape[0]

    def total(self) -> int:
        return int(self.matrix.sum() + self.missed.sum() + self.void_skipped)


@dataclass(frozen=True)
class Metrics:
    """Per-class IoU (payload -1 where the class never occurs) and its mean."""

    per_class_iou: np.ndarray
    mean_iou: float
    chi2_mean: Optional[float] = None
    sp_accuracy: Optional[float] = None


def predicted_mask(probs: np.ndarray) -> LabelMask:
    """Per-pixel argmax of a softmax stack; ties go to the lower class."""
    return LabelMask(np.argmax(probs, axis=2).astype(np.int32),
                     num_classes=probs.shape[2])


def accumulate_confusion(pred_mask: LabelMask, truth: LabelMask,
                         counts: Optional[ConfusionCounts] = None) -> ConfusionCounts:
    if pred_mask.labels.shape != truth.labels.shape:
        raise ValueError("prediction and truth sizes disagree")
    if pred_mask.num_classes != truth.num_classes:
        raise ValueError("prediction and truth class counts disagree")
    if counts is None:
        counts = ConfusionCounts.zeros(truth.num_classes)

    truth_valid = truth.valid()
    counts.void_skipped += int((~truth_valid).sum())
    pred_void = ~pred_mask.valid()

    scored = truth_valid & ~pred_void
    flat = (truth.labels[scored] * counts.num_classes
            + pred_mask.labels[scored])
    counts.matrix += np.bincount(
        flat, minlength=counts.num_classes ** 2
    ).reshape(counts.num_classes, counts.num_classes)

    dropped = truth_valid & pred_void
    counts.missed += np.bincount(truth.labels[dropped],
                                 minlength=counts.num_classes)
    return counts


def iou_from_confusion(counts: ConfusionCounts) -> Metrics:
    m = counts.matrix
    tp = np.diag(m).astype(np.float64)
    fp = m.sum(axis=0) - tp
    fn = m.sum(axis=1) - tp + counts.missed
    denom = tp + fp + fn
    per_class = np.where(denom > 0, tp / np.maximum(denom, 1), IOU_UNDEFINED)
    defined = per_class[denom > 0]
    mean = float(defined.mean()) if defined.size else IOU_UNDEFINED
    return Metrics(per_class_iou=per_class, mean_iou=mean)


def evaluate_masks(pred_masks: list[LabelMask], truth_masks: list[LabelMask],
                   num_classes: int) -> Metrics:
    counts = ConfusionCounts.zeros(num_classes)
    for pred, truth in zip(pred_masks, truth_masks, strict=True):
        accumulate_confusion(pred, truth, counts)
    return iou_from_confusion(counts)


def evaluate_model(model, dataset: Dataset) -> Metrics:
    """Whole-set IoU of ``model.predict`` against the dataset's masks."""
    for i, (_, mask) in enumerate(dataset.items):
        if mask is None:
            raise ValueError(f"dataset item {i} has no mask; cannot evaluate")
    preds = map_ordered(lambda item: model.predict(item[0]), dataset.items)
    return evaluate_masks(preds, [m for _, m in dataset.items], dataset.num_classes)
