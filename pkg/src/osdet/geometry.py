"""Axis-aligned box algebra: IoU and deterministic class-wise NMS.

Boxes are half-open continuous rectangles; area is
``(x_max - x_min) * (y_max - y_min)`` with no pixel correction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import kernels


@dataclass(frozen=True)
class BoundingBox:
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        coords = (self.x_min, self.y_min, self.x_max, self.y_max)
        if not all(math.isfinite(v) for v in coords):
            raise ValueError(f"box coordinates must be finite, got {coords}")
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ValueError(f"box must have strictly positive area, got {coords}")

    @property
    def area(self) -> float:
        return (self.x_max - self.x_min) * (self.y_max - self.y_min)

    def as_array(self) -> np.ndarray:
        return np.array([self.x_min, self.y_min, self.x_max, self.y_max], dtype=np.float64)

    @staticmethod
    def from_array(arr) -> "BoundingBox":
        x0, y0, x1, y1 = (float(v) for v in arr)
        return BoundingBox(x0, y0, x1, y1)


@dataclass(frozen=True)
class Detection:
    """A classified box with confidence. ``class_id`` is never background."""

    box: BoundingBox
    class_id: int
    score: float

    def __post_init__(self):
        if not (0.0 <= self.score <= 1.0):
            raise ValueError(f"score must lie in [0, 1], got {self.score}")


def iou(a: BoundingBox, b: BoundingBox) -> float:
    """Intersection over union of two boxes; symmetric, in [0, 1]."""
    ix = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    iy = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if ix <= 0.0 or iy <= 0.0:
        return 0.0
    inter = ix * iy
    union = a.area + b.area - inter
    return inter / union


def iou_matrix(boxes_a: np.ndarray, boxes_b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between (N, 4) and (M, 4) xyxy arrays."""
    return kernels.pairwise_iou(boxes_a, boxes_b)


def _det_sort_key(d: Detection):
    return (-d.score, d.box.x_min, d.box.y_min, d.class_id)


def nms(dets: Sequence[Detection], iou_threshold: float) -> list[Detection]:
    """Class-wise greedy non-maximum suppression.

    Within each class, detections are visited by descending score (ties by
    smaller ``(x_min, y_min)``) and dropped when their IoU with an already
    kept detection of the same class exceeds ``iou_threshold``. The result
    is ordered by descending score.
    """
    if not (0.0 < iou_threshold <= 1.0):
        raise ValueError(f"iou_threshold must lie in (0, 1], got {iou_threshold}")
    if not dets:
        return []
    kept: list[Detection] = []
    by_class: dict[int, list[Detection]] = {}
    for d in dets:
        by_class.setdefault(d.class_id, []).append(d)
    for class_id in sorted(by_class):
        group = sorted(by_class[class_id], key=_det_sort_key)
        boxes = np.stack([d.box.as_array() for d in group])
        mask = kernels.nms_keep(boxes, iou_threshold)
        kept.extend(d for d, k in zip(group, mask) if k)
    kept.sort(key=_det_sort_key)
    return kept
