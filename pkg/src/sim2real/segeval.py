"""Semantic-consistency evaluation: confusion matrix, per-class IoU, mIoU.

Accumulation is dataset-global (one matrix across all images); pixels
whose ground truth is the ignore index are skipped entirely.  Prediction
pixels labeled with the ignore index where the ground truth is a real
class land in a reserved void-prediction column: they count against the
ground-truth class's union instead of escaping penalty.  Classes with
zero union are UNDEFINED (None) and excluded from the mean.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dataset import SegLabelMap


class DimensionMismatch(Exception):
    """Ground truth and prediction grids have different shapes."""


class LabelOutOfRange(Exception):
    """A pixel label falls outside the evaluated index space."""


class NoDefinedClasses(Exception):
    """Every class had zero union; the mean is undefined."""


@dataclass
class ConfusionMatrix:
    """k x (k+1) pixel counts: counts[g][p], last column = void predictions."""

    k: int
    counts: np.ndarray = field(default=None)  # type: ignore[assignment]
    pixels_evaluated: int = 0
    pixels_ignored: int = 0

    def __post_init__(self) -> None:
        if self.k < 1:
            raise ValueError("need at least one evaluated category")
        if self.counts is None:
            self.counts = np.zeros((self.k, self.k + 1), dtype=np.int64)
        elif self.counts.shape != (self.k, self.k + 1):
            raise ValueError(
                f"counts shape {self.counts.shape} != ({self.k}, {self.k + 1})"
            )

    @property
    def core(self) -> np.ndarray:
        """The k x k ground-truth-by-prediction block (void column dropped)."""
        return self.counts[:, : self.k]

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        """Element-wise sum; associative and commutative."""
        if other.k != self.k:
            raise DimensionMismatch(f"cannot merge k={other.k} into k={self.k}")
        return ConfusionMatrix(
            k=self.k,
            counts=self.counts + other.counts,
            pixels_evaluated=self.pixels_evaluated + other.pixels_evaluated,
            pixels_ignored=self.pixels_ignored + other.pixels_ignored,
        )


def _first_bad_pixel(bad: np.ndarray) -> tuple[int, int]:
    y, x = np.argwhere(bad)[0]
    return int(x), int(y)


def accumulate(
    cm: ConfusionMatrix, gt: SegLabelMap, pred: SegLabelMap
) -> ConfusionMatrix:
    """Add one image's joint pixel counts to the matrix (in place).

    Pixels with gt == ignore_index are skipped; prediction void pixels go
    to the reserved column.  Raises LabelOutOfRange naming the first
    offending pixel coordinate.
    """
    if gt.labels.shape != pred.labels.shape:
        raise DimensionMismatch(
            f"gt is {gt.width}x{gt.height}, pred is {pred.width}x{pred.height}"
        )
    k = cm.k
    valid = gt.labels != gt.ignore_index

    bad_gt = valid & ((gt.labels < 0) | (gt.labels >= k))
    if bad_gt.any():
        x, y = _first_bad_pixel(bad_gt)
        raise LabelOutOfRange(
            f"gt label {int(gt.labels[y, x])} at pixel ({x}, {y}) outside "
            f"the {k}-class range"
        )
    pred_mapped = np.where(pred.labels == pred.ignore_index, k, pred.labels)
    bad_pred = valid & ((pred_mapped < 0) | (pred_mapped > k))
    if bad_pred.any():
        x, y = _first_bad_pixel(bad_pred)
        raise LabelOutOfRange(
            f"pred label {int(pred.labels[y, x])} at pixel ({x}, {y}) outside "
            f"the {k}-class range"
        )

    g = gt.labels[valid].astype(np.int64)
    p = pred_mapped[valid].astype(np.int64)
    joint = np.bincount(g * (k + 1) + p, minlength=k * (k + 1))
    cm.counts += joint.reshape(k, k + 1)
    cm.pixels_evaluated += int(valid.sum())
    cm.pixels_ignored += int(valid.size - valid.sum())
    return cm


def iou_per_class(cm: ConfusionMatrix) -> list[float | None]:
    """counts[c][c] / (gt_c + pred_c - counts[c][c]); None when union is 0.

    gt_c includes void predictions of class-c pixels, so predicting void
    still hurts the class's IoU.
    """
    inter = np.diag(cm.core).astype(np.float64)
    gt_totals = cm.counts.sum(axis=1).astype(np.float64)
    pred_totals = cm.core.sum(axis=0).astype(np.float64)
    union = gt_totals + pred_totals - inter
    out: list[float | None] = []
    for c in range(cm.k):
        out.append(float(inter[c] / union[c]) if union[c] > 0 else None)
    return out


def miou(cm: ConfusionMatrix) -> float:
    """Mean IoU over defined classes only."""
    defined = [v for v in iou_per_class(cm) if v is not None]
    if not defined:
        raise NoDefinedClasses("no class has a non-zero union")
    return float(sum(defined) / len(defined))


def evaluate_maps(
    pairs: list[tuple[SegLabelMap, SegLabelMap]], k: int
) -> ConfusionMatrix:
    """Accumulate a (gt, pred) sequence into one dataset-global matrix."""
    cm = ConfusionMatrix(k=k)
    for gt, pred in pairs:
        accumulate(cm, gt, pred)
    return cm
