"""Axis-aligned boxes, IoU and class-aware non-maximum suppression."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from ._backend import kernels


@dataclass(frozen=True)
class Box:
    """Corner-encoded box ``(x1, y1, x2, y2)`` in pixels."""

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        vals = (self.x1, self.y1, self.x2, self.y2)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError(f"non-finite box coordinates {vals}")
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise ValueError(f"degenerate box {vals}: need x1 < x2 and y1 < y2")

    @classmethod
    def from_xywh(cls, x: float, y: float, w: float, h: float) -> "Box":
        return cls(x, y, x + w, y + h)

    def to_xywh(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2 - self.x1, self.y2 - self.y1)

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1)

    def hflip(self, image_width: float) -> "Box":
        return Box(image_width - self.x2, self.y1, image_width - self.x1, self.y2)


@dataclass(frozen=True)
class Annotation:
    box: Box
    class_id: int


@dataclass(frozen=True)
class Detection:
    box: Box
    class_id: int
    score: float

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score {self.score} outside [0, 1]")


def iou(a: Box, b: Box) -> float:
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def boxes_to_array(boxes: Iterable[Box]) -> np.ndarray:
    arr = np.array([b.as_tuple() for b in boxes], dtype=np.float64)
    return arr.reshape(-1, 4)


def iou_matrix(a, b) -> np.ndarray:
    """Pairwise IoU between two ``(N, 4)`` / ``(M, 4)`` corner arrays."""
    a = np.ascontiguousarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.ascontiguousarray(b, dtype=np.float64).reshape(-1, 4)
    return kernels.iou_matrix(a, b)


def nms_indices(boxes, scores, classes, iou_threshold: float) -> np.ndarray:
    """Indices kept by greedy per-class NMS, in descending-score order.

    A candidate is suppressed by an already-kept box of the same class when
    their IoU exceeds ``iou_threshold``. Equal scores keep the lower index.
    """
    boxes = np.ascontiguousarray(boxes, dtype=np.float64).reshape(-1, 4)
    scores = np.ascontiguousarray(scores, dtype=np.float64).reshape(-1)
    classes = np.ascontiguousarray(classes, dtype=np.int64).reshape(-1)
    if len(boxes) == 0:
        return np.zeros(0, dtype=np.intp)
    return kernels.nms_keep(boxes, scores, classes, float(iou_threshold))


def nms(dets: Sequence[Detection], iou_threshold: float) -> list[Detection]:
    if not 0.0 <= iou_threshold <= 1.0:
        raise ValueError(f"iou_threshold {iou_threshold} outside [0, 1]")
    if not dets:
        return []
    keep = nms_indices(
        boxes_to_array(d.box for d in dets),
        [d.score for d in dets],
        [d.class_id for d in dets],
        iou_threshold,
    )
    return [dets[i] for i in keep]
