"""Center-parameterized boxes, IoU, anchor-relative encoding and anchor grids."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Box:
    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise ValueError(f"box extents must be positive, got w={self.w}, h={self.h}")

    @property
    def x0(self):
        return self.cx - self.w / 2

    @property
    def y0(self):
        return self.cy - self.h / 2

    @property
    def x1(self):
        return self.cx + self.w / 2

    @property
    def y1(self):
        return self.cy + self.h / 2

    @property
    def area(self):
        return self.w * self.h

    def as_tuple(self):
        return (self.cx, self.cy, self.w, self.h)


@dataclass(frozen=True)
class BoxDelta:
    tx: float
    ty: float
    tw: float
    th: float

    def __post_init__(self):
        if not all(math.isfinite(v) for v in self.as_tuple()):
            raise ValueError(f"box delta must be finite: {self}")

    def as_tuple(self):
        return (self.tx, self.ty, self.tw, self.th)


def intersection(a: Box, b: Box) -> float:
    iw = min(a.x1, b.x1) - max(a.x0, b.x0)
    ih = min(a.y1, b.y1) - max(a.y0, b.y0)
    if iw <= 0 or ih <= 0:
        return 0.0
    return iw * ih


def iou(a: Box, b: Box) -> float:
    inter = intersection(a, b)
    return inter / (a.area + b.area - inter)


def coverage(anchor: Box, region: Box) -> float:
    """Fraction of ``anchor`` lying inside ``region``."""
    return intersection(anchor, region) / anchor.area


def encode(gt: Box, anchor: Box) -> BoxDelta:
    if gt.w <= 0 or gt.h <= 0 or anchor.w <= 0 or anchor.h <= 0:
        raise ValueError("encode needs positive extents")
    return BoxDelta(
        (gt.cx - anchor.cx) / anchor.w,
        (gt.cy - anchor.cy) / anchor.h,
        math.log(gt.w / anchor.w),
        math.log(gt.h / anchor.h),
    )


def decode(d: BoxDelta, anchor: Box) -> Box:
    return Box(
        anchor.cx + d.tx * anchor.w,
        anchor.cy + d.ty * anchor.h,
        anchor.w * math.exp(d.tw),
        anchor.h * math.exp(d.th),
    )


def clip_box(b: Box, width: float, height: float, min_size: float = 1.0) -> Box:
    """Clip to the pixel-edge bounds [-0.5, width-0.5] x [-0.5, height-0.5]."""
    x0 = min(max(b.x0, -0.5), width - 0.5 - min_size)
    y0 = min(max(b.y0, -0.5), height - 0.5 - min_size)
    x1 = max(min(b.x1, width - 0.5), x0 + min_size)
    y1 = max(min(b.y1, height - 0.5), y0 + min_size)
    return Box((x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0)


def grid_offsets(extent: float, stride: float) -> np.ndarray:
    """Integer multiples of stride reaching at most extent/2 from the center."""
    n = int(math.floor((extent / 2) / stride + 1e-9))
    return np.arange(-n, n + 1) * stride


def anchor_grid(region: Box, scales, stride: int) -> np.ndarray:
    """Every (grid point, scale) square as an ``[n, 4]`` array, row-major then scale."""
    xs = region.cx + grid_offsets(region.w, stride)
    ys = region.cy + grid_offsets(region.h, stride)
    s = np.asarray(scales, dtype=np.float64)
    gy, gx, gs = np.meshgrid(ys, xs, s, indexing="ij")
    return np.stack([gx.ravel(), gy.ravel(), gs.ravel(), gs.ravel()], axis=1)


def overlap_with(boxes: np.ndarray, ref: Box, overlap: str = "iou") -> np.ndarray:
    """Vectorized IoU (or anchor coverage) of ``[n, 4]`` boxes against ``ref``."""
    if overlap == "iou":
        return iou_matrix(boxes, np.array(ref.as_tuple()))
    if overlap == "coverage":
        return intersection_matrix(boxes, np.array(ref.as_tuple())) / (boxes[:, 2] * boxes[:, 3])
    raise ValueError(f"unknown overlap measure {overlap!r}")


def anchor_array(region: Box, scales, stride: int, reference: Box, min_iou: float,
                 overlap: str = "iou") -> np.ndarray:
    """Array form of :func:`generate_anchors`."""
    scales = list(scales)
    if not scales:
        raise ValueError("at least one anchor scale is required")
    if not 0.0 <= min_iou <= 1.0:
        raise ValueError(f"min_iou must lie in [0, 1], got {min_iou}")
    if stride < 1:
        raise ValueError("stride must be positive")
    grid = anchor_grid(region, scales, stride)
    if min_iou == 0.0:
        return grid
    return grid[overlap_with(grid, reference, overlap) > min_iou]


def generate_anchors(region: Box, scales, stride: int, reference: Box,
                     min_iou: float, overlap: str = "iou") -> list:
    """Square anchors on a stride grid through the region center.

    One anchor per (grid point, scale), row-major over the grid then by
    scale, kept when ``overlap(anchor, reference) > min_iou``. ``overlap`` is
    ``"iou"`` or ``"coverage"`` (fraction of the anchor inside the reference).
    A ``min_iou`` of 0 keeps everything.
    """
    arr = anchor_array(region, scales, stride, reference, min_iou, overlap)
    return [Box(*map(float, row)) for row in arr]


def anchors_array(anchors) -> np.ndarray:
    """Stack boxes into an ``[n, 4]`` array of (cx, cy, w, h)."""
    if not anchors:
        return np.zeros((0, 4))
    return np.array([a.as_tuple() for a in anchors], dtype=np.float64)


def intersection_matrix(boxes: np.ndarray, ref: np.ndarray) -> np.ndarray:
    bx0, by0 = boxes[:, 0] - boxes[:, 2] / 2, boxes[:, 1] - boxes[:, 3] / 2
    bx1, by1 = boxes[:, 0] + boxes[:, 2] / 2, boxes[:, 1] + boxes[:, 3] / 2
    rx0, ry0, rx1, ry1 = ref[0] - ref[2] / 2, ref[1] - ref[3] / 2, ref[0] + ref[2] / 2, ref[1] + ref[3] / 2
    iw = np.clip(np.minimum(bx1, rx1) - np.maximum(bx0, rx0), 0, None)
    ih = np.clip(np.minimum(by1, ry1) - np.maximum(by0, ry0), 0, None)
    return iw * ih


def iou_matrix(boxes: np.ndarray, ref: np.ndarray) -> np.ndarray:
    """IoU of each row of ``boxes`` against a single (cx, cy, w, h) ``ref``."""
    inter = intersection_matrix(boxes, ref)
    return inter / (boxes[:, 2] * boxes[:, 3] + ref[2] * ref[3] - inter)
