"""Axis-aligned boxes: IoU, greedy NMS, center/size regression targets, smooth-L1.

Boxes are half-open real rectangles ``(x1, y1, x2, y2)``; areas are exact
``(x2 - x1) * (y2 - y1)`` with no +1 pixel convention.
"""
from __future__ import annotations

import math
from typing import NamedTuple, Sequence

import numpy as np


class BoxError(ValueError):
    pass


class Box(NamedTuple):
    x1: float
    y1: float
    x2: float
    y2: float

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    def validate(self) -> "Box":
        if not all(math.isfinite(v) for v in self):
            raise BoxError(f"non-finite box {tuple(self)}")
        if not (self.x2 > self.x1 and self.y2 > self.y1):
            raise BoxError(f"degenerate box {tuple(self)}")
        return self


class RegressionTarget(NamedTuple):
    tx: float
    ty: float
    tw: float
    th: float


def iou(a: Sequence[float], b: Sequence[float]) -> float:
    a = Box(*a).validate()
    b = Box(*b).validate()
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between (n, 4) and (m, 4) box arrays."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    return inter / (area_a[:, None] + area_b[None, :] - inter)


def nms(boxes: Sequence[Sequence[float]], scores: Sequence[float], threshold: float = 0.3) -> list[int]:
    """Greedy suppression; returns kept indices in descending score order.

    Equal scores are visited lowest index first. A box is kept iff its IoU
    with every already-kept box is <= ``threshold``.
    """
    if not 0 < threshold < 1:
        raise ValueError(f"nms threshold must lie in (0, 1), got {threshold}")
    if len(boxes) == 0:
        return []
    arr = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    sc = np.asarray(scores, dtype=np.float64)
    order = np.lexsort((np.arange(len(sc)), -sc))
    overlaps = iou_matrix(arr, arr)
    keep: list[int] = []
    for i in order:
        if all(overlaps[i, k] <= threshold for k in keep):
            keep.append(int(i))
    return keep


def _center_size(box: np.ndarray):
    w = box[..., 2] - box[..., 0]
    h = box[..., 3] - box[..., 1]
    return box[..., 0] + 0.5 * w, box[..., 1] + 0.5 * h, w, h


def encode_targets(proposals: np.ndarray, gts: np.ndarray) -> np.ndarray:
    """Vectorized :func:`encode_target` over matching rows of (n, 4) arrays."""
    px, py, pw, ph = _center_size(np.asarray(proposals, dtype=np.float64))
    gx, gy, gw, gh = _center_size(np.asarray(gts, dtype=np.float64))
    return np.stack([(gx - px) / pw, (gy - py) / ph, np.log(gw / pw), np.log(gh / ph)], axis=-1)


def decode_targets(deltas: np.ndarray, proposals: np.ndarray, bounds: tuple[float, float] | None = None) -> np.ndarray:
    px, py, pw, ph = _center_size(np.asarray(proposals, dtype=np.float64))
    d = np.asarray(deltas, dtype=np.float64)
    cx = px + d[..., 0] * pw
    cy = py + d[..., 1] * ph
    w = pw * np.exp(d[..., 2])
    h = ph * np.exp(d[..., 3])
    out = np.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], axis=-1)
    if bounds is not None:
        width, height = bounds
        out[..., 0::2] = np.clip(out[..., 0::2], 0.0, width)
        out[..., 1::2] = np.clip(out[..., 1::2], 0.0, height)
    return out


def encode_target(proposal: Sequence[float], gt: Sequence[float]) -> RegressionTarget:
    p = np.asarray(Box(*proposal).validate(), dtype=np.float64)
    g = np.asarray(Box(*gt).validate(), dtype=np.float64)
    return RegressionTarget(*(float(v) for v in encode_targets(p, g)))


def decode_target(t: Sequence[float], proposal: Sequence[float], bounds: tuple[float, float] | None = None) -> Box:
    p = np.asarray(Box(*proposal).validate(), dtype=np.float64)
    return Box(*(float(v) for v in decode_targets(np.asarray(t, dtype=np.float64), p, bounds)))


def smooth_l1(x: float) -> float:
    a = abs(x)
    return 0.5 * x * x if a < 1.0 else a - 0.5
