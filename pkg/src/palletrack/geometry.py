"""Axis-aligned box arithmetic: IoU, objectness labels, anchors, NMS."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

IMAGE_SIZE = 250

# Objectness thresholds: above the upper bound an anchor counts as an object,
# below the lower bound as background; in between it is ignored in training.
OBJECT_IOU = 0.7
BACKGROUND_IOU = 0.3

# Anchor lattice defaults, sized so the EUR pallet footprint (1.2 m x 0.8 m,
# i.e. 57 x 38 px at 0.0212 m/px) is representable within a half-stride offset.
DEFAULT_SCALES = (24.0, 40.0, 47.0)
DEFAULT_RATIOS = (2.0 / 3.0, 1.0, 1.5)
DEFAULT_STRIDE = 8


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned box in pixel coordinates, stored as origin + extent."""

    x_min: float
    y_min: float
    x_len: float
    y_len: float

    def __post_init__(self):
        for name in ("x_min", "y_min", "x_len", "y_len"):
            object.__setattr__(self, name, float(getattr(self, name)))
        if self.x_len <= 0 or self.y_len <= 0:
            raise ValueError(f"box extents must be positive, got {self}")
        if self.x_min < 0 or self.y_min < 0:
            raise ValueError(f"box origin must be non-negative, got {self}")

    @property
    def x_max(self) -> float:
        return self.x_min + self.x_len

    @property
    def y_max(self) -> float:
        return self.y_min + self.y_len

    @property
    def area(self) -> float:
        return self.x_len * self.y_len

    @property
    def center(self) -> tuple[float, float]:
        return (self.x_min + self.x_len / 2.0, self.y_min + self.y_len / 2.0)

    def pixel_bounds(self, image_size: int = IMAGE_SIZE) -> tuple[int, int, int, int]:
        """Integer (col0, col1, row0, row1) half-open pixel span, clipped."""
        c0 = max(0, int(math.floor(self.x_min)))
        r0 = max(0, int(math.floor(self.y_min)))
        c1 = min(image_size, int(math.ceil(self.x_max)))
        r1 = min(image_size, int(math.ceil(self.y_max)))
        return c0, max(c1, c0 + 1), r0, max(r1, r0 + 1)


class ObjectnessLabel(enum.Enum):
    NOT_OBJECT = 0
    OBJECT = 1
    IGNORE = 2


@dataclass(frozen=True)
class Anchor:
    box: BoundingBox
    scale_index: int
    ratio_index: int
    center: tuple[float, float]


def iou(a: BoundingBox, b: BoundingBox) -> float:
    """Intersection-over-union on continuous box areas."""
    iw = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    ih = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def label_anchor(anchor: Anchor, truths: Sequence[BoundingBox]) -> ObjectnessLabel:
    """Objectness of an anchor against ground truth boxes.

    Max IoU above OBJECT_IOU is an object, below BACKGROUND_IOU is
    background, anything in between is excluded from training.
    """
    best = max((iou(anchor.box, t) for t in truths), default=0.0)
    if best > OBJECT_IOU:
        return ObjectnessLabel.OBJECT
    if best < BACKGROUND_IOU:
        return ObjectnessLabel.NOT_OBJECT
    return ObjectnessLabel.IGNORE


def _clip_box(x_min: float, y_min: float, x_max: float, y_max: float,
              image_size: int) -> BoundingBox | None:
    x0 = max(0.0, x_min)
    y0 = max(0.0, y_min)
    x1 = min(float(image_size), x_max)
    y1 = min(float(image_size), y_max)
    if x1 - x0 <= 0 or y1 - y0 <= 0:
        return None
    return BoundingBox(x0, y0, x1 - x0, y1 - y0)


def generate_anchors(image_size: int = IMAGE_SIZE,
                     stride: int = DEFAULT_STRIDE,
                     scales: Sequence[float] = DEFAULT_SCALES,
                     ratios: Sequence[float] = DEFAULT_RATIOS) -> list[Anchor]:
    """Anchor lattice: one anchor per (scale, ratio) at each grid center.

    Centers sit at (i + 0.5) * stride; boxes are clipped to the image and
    anchors whose clipped area degenerates to zero are dropped.  A ratio is
    height over width; the scale is the side of the equal-area square.
    """
    if stride < 1:
        raise ValueError("stride must be >= 1")
    if any(s <= 0 for s in scales) or any(r <= 0 for r in ratios):
        raise ValueError("scales and ratios must be strictly positive")
    shapes = []
    for si, scale in enumerate(scales):
        for ri, ratio in enumerate(ratios):
            w = scale / math.sqrt(ratio)
            h = scale * math.sqrt(ratio)
            shapes.append((si, ri, w, h))
    n_centers = math.ceil(image_size / stride)
    anchors = []
    for gy in range(n_centers):
        cy = (gy + 0.5) * stride
        for gx in range(n_centers):
            cx = (gx + 0.5) * stride
            for si, ri, w, h in shapes:
                box = _clip_box(cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2,
                                image_size)
                if box is not None:
                    anchors.append(Anchor(box, si, ri, (cx, cy)))
    return anchors


def nms(detections: Iterable[tuple[BoundingBox, float]],
        overlap_threshold: float) -> list[tuple[BoundingBox, float]]:
    """Greedy non-maximum suppression, highest score first.

    Ties are broken by ascending (x_min, y_min) so the result is
    deterministic.  Any two retained boxes overlap at most by the threshold.
    """
    items = list(detections)
    if not items:
        return []
    scores = np.array([s for _, s in items], dtype=float)
    if not np.isfinite(scores).all():
        raise ValueError("non-finite detection score")
    x0 = np.array([b.x_min for b, _ in items])
    y0 = np.array([b.y_min for b, _ in items])
    x1 = np.array([b.x_max for b, _ in items])
    y1 = np.array([b.y_max for b, _ in items])
    areas = (x1 - x0) * (y1 - y0)
    order = np.lexsort((y0, x0, -scores))
    kept: list[int] = []
    while order.size:
        top = order[0]
        kept.append(int(top))
        rest = order[1:]
        iw = np.minimum(x1[top], x1[rest]) - np.maximum(x0[top], x0[rest])
        ih = np.minimum(y1[top], y1[rest]) - np.maximum(y0[top], y0[rest])
        inter = np.clip(iw, 0.0, None) * np.clip(ih, 0.0, None)
        overlap = inter / (areas[top] + areas[rest] - inter)
        order = rest[overlap <= overlap_threshold]
    return [items[i] for i in kept]
