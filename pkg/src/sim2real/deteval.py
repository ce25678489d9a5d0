"""Detection consistency evaluation: box IoU, greedy matching, AP, mAP@50.

Matching is the standard benchmark convention: detections are processed
in descending confidence (ties broken by input order, then by a content
hash of the detection), each one consuming the unmatched ground-truth box
with the highest IoU at or above the threshold.  AP is the exact area
under the stepwise max-precision envelope (all-point interpolation).
Classes without ground truth are excluded from the mean, never scored.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

from .dataset import DatasetManifest, DetectionAnnotation

Box = tuple[float, float, float, float]

DEFAULT_IOU_THRESHOLD = 0.5


class DegenerateBox(Exception):
    """A box has no area (x_min >= x_max or y_min >= y_max)."""


class NoGroundTruth(Exception):
    """AP is undefined for a class with zero ground-truth boxes."""


class NoDefinedClasses(Exception):
    """No class has ground truth; the mean is undefined."""


@dataclass(frozen=True)
class Detection:
    """One predicted box with a confidence score in [0, 1]."""

    image_id: str
    class_index: int
    confidence: float
    box: Box

    def __post_init__(self) -> None:
        x_min, y_min, x_max, y_max = self.box
        if not (x_min < x_max and y_min < y_max):
            raise DegenerateBox(f"box {self.box} on image {self.image_id!r}")
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")

    def content_hash(self) -> str:
        payload = (
            f"{self.image_id}|{self.class_index}|{self.confidence!r}|{self.box!r}"
        )
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class MatchResult:
    """TP/FP flags aligned with detections in descending-confidence order.

    ``order`` maps each flag position back to the index of the detection
    in the input list.
    """

    flags: tuple[bool, ...]
    n_gt: int
    order: tuple[int, ...] = ()


def box_iou(a: Box, b: Box) -> float:
    """Intersection area over union area; 0 when disjoint."""
    for box in (a, b):
        x_min, y_min, x_max, y_max = box
        if not (x_min < x_max and y_min < y_max):
            raise DegenerateBox(f"box {box}")
    ix = min(a[2], b[2]) - max(a[0], b[0])
    iy = min(a[3], b[3]) - max(a[1], b[1])
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    area_a = (a[2] - a[0]) * (a[3] - a[1])
    area_b = (b[2] - b[0]) * (b[3] - b[1])
    return inter / (area_a + area_b - inter)


def _sorted_indices(dets: list[Detection]) -> list[int]:
    return sorted(
        range(len(dets)),
        key=lambda i: (-dets[i].confidence, i, dets[i].content_hash()),
    )


def match_detections(
    dets: list[Detection],
    gts: list[Box],
    threshold: float = DEFAULT_IOU_THRESHOLD,
) -> MatchResult:
    """Greedy confidence-ordered matching for one image and class.

    Each detection matches the unmatched ground truth with the highest
    IoU >= threshold (TP, ground truth consumed) or is a false positive.
    """
    if not 0.0 < threshold <= 1.0:
        raise ValueError(f"threshold {threshold} outside (0, 1]")
    keys = {(d.image_id, d.class_index) for d in dets}
    if len(keys) > 1:
        raise ValueError(f"detections span multiple image/class pairs: {keys}")

    order = _sorted_indices(dets)
    matched = [False] * len(gts)
    flags: list[bool] = []
    for i in order:
        best_iou = 0.0
        best_gt = -1
        for j, gt_box in enumerate(gts):
            if matched[j]:
                continue
            iou = box_iou(dets[i].box, gt_box)
            if iou >= threshold and iou > best_iou:
                best_iou = iou
                best_gt = j
        if best_gt >= 0:
            matched[best_gt] = True
            flags.append(True)
        else:
            flags.append(False)
    return MatchResult(flags=tuple(flags), n_gt=len(gts), order=tuple(order))


def average_precision(match: MatchResult) -> float:
    """Exact area under the max-precision envelope of the PR curve.

    Computed as sum over true-positive ranks of the envelope precision,
    divided by n_gt, which makes the all-TPs-first case exactly t / n_gt.
    """
    if match.n_gt < 1:
        raise NoGroundTruth("AP undefined with zero ground-truth boxes")
    if not match.flags:
        return 0.0
    tp = 0
    precisions: list[float] = []
    for rank, flag in enumerate(match.flags, start=1):
        if flag:
            tp += 1
        precisions.append(tp / rank)
    envelope = precisions[:]
    for i in range(len(envelope) - 2, -1, -1):
        envelope[i] = max(envelope[i], envelope[i + 1])
    gain = math.fsum(env for env, flag in zip(envelope, match.flags) if flag)
    return gain / match.n_gt


@dataclass
class Map50Report:
    """Per-class APs and their mean over classes holding ground truth."""

    per_class_ap: dict[str, float | None]
    map50: float
    n_images: int
    n_gt: int
    n_pred: int
    iou_threshold: float = DEFAULT_IOU_THRESHOLD
    interpolation: str = "all_point"

    def to_dict(self) -> dict:
        return {
            "per_class_ap": dict(self.per_class_ap),
            "map50": self.map50,
            "n_images": self.n_images,
            "n_gt": self.n_gt,
            "n_pred": self.n_pred,
            "iou_threshold": self.iou_threshold,
            "interpolation": self.interpolation,
        }


def map50(
    dets: list[Detection],
    gts: list[DetectionAnnotation],
    manifest: DatasetManifest,
    threshold: float = DEFAULT_IOU_THRESHOLD,
) -> Map50Report:
    """Mean AP at the IoU threshold over classes with ground truth.

    Matching runs per image and class; per-class flags are then merged in
    global descending-confidence order (input order, then content hash, on
    ties) before the AP integration.
    """
    if manifest.annotation_kind != "detection":
        raise ValueError(
            f"manifest {manifest.name!r} is {manifest.annotation_kind}-kind"
        )
    k = len(manifest.categories)

    gt_boxes: dict[tuple[str, int], list[Box]] = {}
    gt_per_class = [0] * k
    for ann in gts:
        if not 0 <= ann.class_index < k:
            raise ValueError(
                f"ground-truth class index {ann.class_index} outside the "
                f"{k}-category set; run validate_detections first"
            )
        gt_boxes.setdefault((ann.image_id, ann.class_index), []).append(ann.box)
        gt_per_class[ann.class_index] += 1

    det_groups: dict[tuple[str, int], list[tuple[int, Detection]]] = {}
    for idx, det in enumerate(dets):
        if not 0 <= det.class_index < k:
            raise ValueError(
                f"detection class index {det.class_index} outside the "
                f"{k}-category set; run validate_detections first"
            )
        det_groups.setdefault((det.image_id, det.class_index), []).append((idx, det))

    # (confidence-descending sort key, flag) per detection, per class
    class_entries: dict[int, list[tuple[tuple, bool]]] = {c: [] for c in range(k)}
    for (image_id, class_index), group in det_groups.items():
        group_dets = [det for _, det in group]
        result = match_detections(
            group_dets, gt_boxes.get((image_id, class_index), []), threshold
        )
        for pos, flag in zip(result.order, result.flags):
            global_idx, det = group[pos]
            key = (-det.confidence, global_idx, det.content_hash())
            class_entries[class_index].append((key, flag))

    per_class_ap: dict[str, float | None] = {}
    defined: list[float] = []
    for c, name in enumerate(manifest.categories):
        if gt_per_class[c] == 0:
            per_class_ap[name] = None
            continue
        entries = sorted(class_entries[c], key=lambda e: e[0])
        flags = tuple(flag for _, flag in entries)
        ap = average_precision(MatchResult(flags=flags, n_gt=gt_per_class[c]))
        per_class_ap[name] = ap
        defined.append(ap)

    if not defined:
        raise NoDefinedClasses("no class has ground-truth boxes")

    return Map50Report(
        per_class_ap=per_class_ap,
        map50=float(sum(defined) / len(defined)),
        n_images=len(manifest.records),
        n_gt=len(gts),
        n_pred=len(dets),
        iou_threshold=threshold,
    )
