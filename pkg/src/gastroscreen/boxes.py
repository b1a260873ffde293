"""Axis-aligned box types shared by the detector, miner, and evaluation kit.

Boxes are half-open: [x_min, x_max) x [y_min, y_max) in pixel coordinates.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "LESION",
    "HARD_SAMPLE",
    "CLASS_LABELS",
    "BoundingBox",
    "Annotation",
    "Detection",
    "iou",
    "nms",
]

LESION = "lesion"
HARD_SAMPLE = "hard-sample"
CLASS_LABELS = (LESION, HARD_SAMPLE)


@dataclass(frozen=True, order=True)
class BoundingBox:
    x_min: int
    y_min: int
    x_max: int
    y_max: int

    def __post_init__(self):
        if self.x_min >= self.x_max or self.y_min >= self.y_max:
            raise ValueError(f"degenerate box {self.as_tuple()}")

    def as_tuple(self) -> tuple[int, int, int, int]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)

    @property
    def area(self) -> int:
        return (self.x_max - self.x_min) * (self.y_max - self.y_min)

    def within(self, width: int, height: int) -> bool:
        return 0 <= self.x_min and 0 <= self.y_min and self.x_max <= width and self.y_max <= height


@dataclass(frozen=True)
class Annotation:
    box: BoundingBox
    class_label: str = LESION

    def __post_init__(self):
        if self.class_label not in CLASS_LABELS:
            raise ValueError(f"unknown class label {self.class_label!r}")


@dataclass(frozen=True)
class Detection:
    box: BoundingBox
    class_label: str
    confidence: float

    def __post_init__(self):
        if self.class_label not in CLASS_LABELS:
            raise ValueError(f"unknown class label {self.class_label!r}")
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence must lie in [0, 1], got {self.confidence}")


def iou(a: BoundingBox, b: BoundingBox) -> float:
    """Intersection area over union area; 0 for disjoint boxes."""
    ix = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    iy = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    return inter / float(a.area + b.area - inter)


def _det_sort_key(det: Detection):
    # descending confidence; remaining fields make ties deterministic
    return (-det.confidence, det.box.y_min, det.box.x_min, det.box.y_max, det.box.x_max, det.class_label)


def nms_arrays(
    box_arr: np.ndarray,
    scores: np.ndarray,
    class_idx: np.ndarray,
    iou_threshold: float,
) -> np.ndarray:
    """Greedy per-class non-maximum suppression on packed arrays.

    Returns the kept indices ordered by descending score (ties broken by
    box coordinates then class for determinism). A candidate is suppressed
    when its IoU with an already-kept box of the same class reaches the
    threshold.
    """
    n = box_arr.shape[0]
    if n == 0:
        return np.empty(0, dtype=np.int64)
    x1 = box_arr[:, 0].astype(np.float64)
    y1 = box_arr[:, 1].astype(np.float64)
    x2 = box_arr[:, 2].astype(np.float64)
    y2 = box_arr[:, 3].astype(np.float64)
    areas = (x2 - x1) * (y2 - y1)
    order = np.lexsort((class_idx, x2, y2, x1, y1, -scores))
    suppressed = np.zeros(n, dtype=bool)
    keep = []
    for idx in order:
        if suppressed[idx]:
            continue
        keep.append(idx)
        same = (class_idx == class_idx[idx]) & ~suppressed
        same[idx] = False
        if not same.any():
            continue
        cand = np.nonzero(same)[0]
        iw = np.minimum(x2[cand], x2[idx]) - np.maximum(x1[cand], x1[idx])
        ih = np.minimum(y2[cand], y2[idx]) - np.maximum(y1[cand], y1[idx])
        inter = np.clip(iw, 0.0, None) * np.clip(ih, 0.0, None)
        overlap = inter / (areas[cand] + areas[idx] - inter)
        suppressed[cand[overlap >= iou_threshold]] = True
    return np.asarray(keep, dtype=np.int64)


def nms(dets: list[Detection], iou_threshold: float) -> list[Detection]:
    """Greedy confidence-ordered NMS within each class.

    Suppresses a detection whose IoU with an already-kept detection of the
    same class is >= iou_threshold; output is sorted by descending
    confidence.
    """
    if not 0.0 < iou_threshold <= 1.0:
        raise ValueError(f"iou_threshold must be in (0, 1], got {iou_threshold}")
    if not dets:
        return []
    labels = sorted({d.class_label for d in dets})
    label_to_idx = {lab: i for i, lab in enumerate(labels)}
    ordered = sorted(dets, key=_det_sort_key)
    box_arr = np.array([d.box.as_tuple() for d in ordered], dtype=np.float64)
    scores = np.array([d.confidence for d in ordered], dtype=np.float64)
    class_idx = np.array([label_to_idx[d.class_label] for d in ordered], dtype=np.int64)
    kept = nms_arrays(box_arr, scores, class_idx, iou_threshold)
    return [ordered[i] for i in sorted(kept, key=lambda i: i)]
