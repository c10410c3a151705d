"""
Axis-aligned box arithmetic.

Boxes use continuous pixel coordinates with no "+1" convention, matching the
COCO JSON format. Two storage conventions are supported:

- xyxy: (x_min, y_min, x_max, y_max)
- xywh: (x, y, w, h), the COCO ``bbox`` field
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import MalformedBoxError


@dataclass(frozen=True, slots=True)
class BBox:
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        if not (self.x_max >= self.x_min and self.y_max >= self.y_min):
            raise MalformedBoxError(
                f"box has negative extent: {self.as_xyxy()}")

    @classmethod
    def from_corners(cls, x1, y1, x2, y2) -> "BBox":
        """Build a box from two arbitrary opposite corners (normalizing order)."""
        return cls(min(x1, x2), min(y1, y2), max(x1, x2), max(y1, y2))

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return (self.x_max - self.x_min) * (self.y_max - self.y_min)

    def as_xyxy(self) -> tuple[float, float, float, float]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)

    def as_xywh(self) -> tuple[float, float, float, float]:
        return (self.x_min, self.y_min, self.x_max - self.x_min, self.y_max - self.y_min)

    def translated(self, dx: float, dy: float) -> "BBox":
        return BBox(self.x_min + dx, self.y_min + dy, self.x_max + dx, self.y_max + dy)

    def clipped(self, width: float, height: float) -> "BBox":
        """Clip to the image rectangle [0, width] x [0, height]."""
        x1 = min(max(self.x_min, 0.0), width)
        y1 = min(max(self.y_min, 0.0), height)
        x2 = min(max(self.x_max, 0.0), width)
        y2 = min(max(self.y_max, 0.0), height)
        return BBox(x1, y1, x2, y2)


def from_xywh(x: float, y: float, w: float, h: float) -> BBox:
    """Convert a COCO ``[x, y, w, h]`` box to corner form.

    Raises:
        MalformedBoxError: if ``w`` or ``h`` is negative or any value is not finite.
    """
    x, y, w, h = float(x), float(y), float(w), float(h)
    if not all(math.isfinite(v) for v in (x, y, w, h)):
        raise MalformedBoxError(f"non-finite box: {(x, y, w, h)}")
    if w < 0 or h < 0:
        raise MalformedBoxError(f"negative width/height: {(x, y, w, h)}")
    return BBox(x, y, x + w, y + h)


def iou(a: BBox, b: BBox) -> float:
    """Intersection over union of two boxes; 0 when the union is empty."""
    iw = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    ih = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = a.area + b.area - inter
    if union <= 0:
        return 0.0
    return inter / union


def boxes_to_array(boxes: Sequence[BBox]) -> np.ndarray:
    """Stack boxes into an (N, 4) float64 xyxy array."""
    if len(boxes) == 0:
        return np.zeros((0, 4), dtype=np.float64)
    return np.array([b.as_xyxy() for b in boxes], dtype=np.float64)


def xywh_to_xyxy(arr: np.ndarray) -> np.ndarray:
    arr = np.asarray(arr, dtype=np.float64).reshape(-1, 4)
    out = arr.copy()
    out[:, 2] = arr[:, 0] + arr[:, 2]
    out[:, 3] = arr[:, 1] + arr[:, 3]
    return out


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between two sets of xyxy boxes.

    Args:
        a: (N, 4) boxes
        b: (M, 4) boxes

    Returns:
        (N, M) IoU matrix; entries whose union is empty are 0.
    """
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    if len(a) == 0 or len(b) == 0:
        return np.zeros((len(a), len(b)), dtype=np.float64)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    np.clip(iw, 0.0, None, out=iw)
    np.clip(ih, 0.0, None, out=ih)
    inter = iw * ih
    union = area_a[:, None] + area_b[None, :] - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=(union > 0) & (inter > 0))
    return out
