"""Box representation, format conversion, IoU and generalized IoU.

Boxes are stored in normalized center-size form ``(cx, cy, w, h)``.  All
overlap functions accept degenerate (zero-area) boxes and report zero
overlap for them instead of raising, because noisy box synthesis can
legitimately produce near-degenerate boxes.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np


class BoxFormat(enum.Enum):
    CENTER_SIZE = "cxcywh"
    CORNERS = "xyxy"


@dataclass(frozen=True)
class Box:
    cx: float
    cy: float
    w: float
    h: float

    @classmethod
    def clamped(cls, cx: float, cy: float, w: float, h: float) -> "Box":
        """Build a box, clamping negative sizes to zero."""
        return cls(float(cx), float(cy), max(float(w), 0.0), max(float(h), 0.0))

    @classmethod
    def from_corners(cls, x1: float, y1: float, x2: float, y2: float) -> "Box":
        return cls.clamped((x1 + x2) / 2.0, (y1 + y2) / 2.0, x2 - x1, y2 - y1)

    @classmethod
    def from_array(cls, values: Sequence[float]) -> "Box":
        cx, cy, w, h = (float(v) for v in values)
        return cls.clamped(cx, cy, w, h)

    def corners(self) -> tuple[float, float, float, float]:
        hw, hh = self.w / 2.0, self.h / 2.0
        return (self.cx - hw, self.cy - hh, self.cx + hw, self.cy + hh)

    def to_list(self) -> list[float]:
        return [self.cx, self.cy, self.w, self.h]

    def to_array(self) -> np.ndarray:
        return np.array(self.to_list(), dtype=float)

    @property
    def area(self) -> float:
        return self.w * self.h


def convert(box: Box, to: BoxFormat) -> tuple[float, float, float, float]:
    """Express ``box`` as a 4-tuple in the requested format."""
    if to is BoxFormat.CORNERS:
        return box.corners()
    return (box.cx, box.cy, box.w, box.h)


def from_format(values: Sequence[float], fmt: BoxFormat) -> Box:
    if fmt is BoxFormat.CORNERS:
        return Box.from_corners(*values)
    return Box.from_array(values)


def _overlap_terms(a: Box, b: Box) -> tuple[float, float, float]:
    ax1, ay1, ax2, ay2 = a.corners()
    bx1, by1, bx2, by2 = b.corners()
    iw = max(0.0, min(ax2, bx2) - max(ax1, bx1))
    ih = max(0.0, min(ay2, by2) - max(ay1, by1))
    inter = iw * ih
    # Areas from corner differences so identical boxes give inter == area exactly.
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    enclose = (max(ax2, bx2) - min(ax1, bx1)) * (max(ay2, by2) - min(ay1, by1))
    return inter, union, enclose


def iou(a: Box, b: Box) -> float:
    inter, union, _ = _overlap_terms(a, b)
    if union <= 0.0:
        return 0.0
    return inter / union


def giou(a: Box, b: Box) -> float:
    inter, union, enclose = _overlap_terms(a, b)
    if enclose <= 0.0:
        return 0.0
    overlap = inter / union if union > 0.0 else 0.0
    return overlap - (enclose - union) / enclose


def boxes_to_array(boxes: Iterable[Box]) -> np.ndarray:
    arr = np.array([b.to_list() for b in boxes], dtype=float)
    return arr.reshape(-1, 4)


def cxcywh_to_xyxy(arr: np.ndarray) -> np.ndarray:
    arr = np.asarray(arr, dtype=float)
    half = arr[..., 2:] / 2.0
    return np.concatenate([arr[..., :2] - half, arr[..., :2] + half], axis=-1)


def xyxy_to_cxcywh(arr: np.ndarray) -> np.ndarray:
    arr = np.asarray(arr, dtype=float)
    return np.concatenate([(arr[..., :2] + arr[..., 2:]) / 2.0, arr[..., 2:] - arr[..., :2]], axis=-1)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between two ``(n, 4)`` / ``(m, 4)`` center-size arrays."""
    a = cxcywh_to_xyxy(np.asarray(a, dtype=float).reshape(-1, 4))
    b = cxcywh_to_xyxy(np.asarray(b, dtype=float).reshape(-1, 4))
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0.0, None)
    inter = wh[..., 0] * wh[..., 1]
    union = area_a[:, None] + area_b[None, :] - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=union > 0)
    return out


def max_iou(box: Box, others: Iterable[Box]) -> float:
    """Largest IoU between ``box`` and any member of ``others`` (0 if empty)."""
    return max((iou(box, o) for o in others), default=0.0)
