"""Box geometry: the (x, y, w, h) box type, IoU, delta coding and NMS.

Files store boxes as ``[x, y, w, h]``; geometry below works on corner
form ``(x1, y1, x2, y2)`` arrays.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .exceptions import ValidationError

# Upper bound on log-space width/height deltas before exponentiation.
DELTA_CLAMP = math.log(1000.0 / 16)


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box in pixels, top-left corner plus size."""

    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        vals = (self.x, self.y, self.w, self.h)
        if not all(math.isfinite(v) for v in vals):
            raise ValidationError(f"non-finite box {vals}")
        if self.w <= 0 or self.h <= 0:
            raise ValidationError(f"box needs positive size, got w={self.w}, h={self.h}")
        if self.x < 0 or self.y < 0:
            raise ValidationError(f"box origin must be non-negative, got x={self.x}, y={self.y}")

    def area(self) -> float:
        return self.w * self.h

    def to_xyxy(self) -> np.ndarray:
        return np.array([self.x, self.y, self.x + self.w, self.y + self.h], dtype=np.float64)

    def to_list(self) -> list[float]:
        return [self.x, self.y, self.w, self.h]

    @classmethod
    def from_xyxy(cls, xyxy) -> "BBox":
        x1, y1, x2, y2 = (float(v) for v in xyxy)
        return cls(x1, y1, x2 - x1, y2 - y1)


def iou(a: BBox, b: BBox) -> float:
    """Intersection over union of two boxes; 0.0 when disjoint."""
    iw = min(a.x + a.w, b.x + b.w) - max(a.x, b.x)
    ih = min(a.y + a.h, b.y + b.h) - max(a.y, b.y)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area() + b.area() - inter)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between corner-form boxes ``a`` (n, 4) and ``b`` (m, 4)."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(inter > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def _centers(xyxy):
    w = xyxy[..., 2] - xyxy[..., 0]
    h = xyxy[..., 3] - xyxy[..., 1]
    return xyxy[..., 0] + 0.5 * w, xyxy[..., 1] + 0.5 * h, w, h


def encode_deltas(proposals: np.ndarray, gts: np.ndarray) -> np.ndarray:
    """Center/log-size deltas that move corner-form ``proposals`` onto ``gts``."""
    proposals = np.asarray(proposals, dtype=np.float64)
    gts = np.asarray(gts, dtype=np.float64)
    pcx, pcy, pw, ph = _centers(proposals)
    gcx, gcy, gw, gh = _centers(gts)
    if np.any(pw <= 0) or np.any(ph <= 0) or np.any(gw <= 0) or np.any(gh <= 0):
        raise ValidationError("delta encoding needs boxes with positive width and height")
    return np.stack(
        [(gcx - pcx) / pw, (gcy - pcy) / ph, np.log(gw / pw), np.log(gh / ph)], axis=-1
    )


def decode_deltas(deltas: np.ndarray, proposals: np.ndarray) -> np.ndarray:
    """Inverse of :func:`encode_deltas`; returns corner-form boxes."""
    deltas = np.asarray(deltas, dtype=np.float64)
    pcx, pcy, pw, ph = _centers(np.asarray(proposals, dtype=np.float64))
    cx = pcx + deltas[..., 0] * pw
    cy = pcy + deltas[..., 1] * ph
    w = pw * np.exp(np.minimum(deltas[..., 2], DELTA_CLAMP))
    h = ph * np.exp(np.minimum(deltas[..., 3], DELTA_CLAMP))
    return np.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], axis=-1)


def encode_reg_target(proposal: BBox, gt: BBox) -> tuple[float, float, float, float]:
    t = encode_deltas(proposal.to_xyxy(), gt.to_xyxy())
    return tuple(float(v) for v in t)


def decode_reg_target(deltas, proposal: BBox) -> BBox:
    """Apply ``deltas`` to ``proposal``.

    Corners that land left of or above the origin are clipped to 0 so the
    result is always a valid :class:`BBox`; for deltas produced by
    :func:`encode_reg_target` this never triggers.
    """
    xyxy = decode_deltas(np.asarray(deltas, dtype=np.float64), proposal.to_xyxy())
    xyxy[:2] = np.maximum(xyxy[:2], 0.0)
    return BBox.from_xyxy(xyxy)


def nms(boxes: np.ndarray, scores: np.ndarray, iou_thresh: float) -> np.ndarray:
    """Greedy non-maximum suppression.

    Returns indices of kept boxes, highest score first. Equal scores keep
    input order. A box is suppressed when its IoU with a kept box exceeds
    ``iou_thresh``.
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")
    keep = []
    while order.size:
        i = order[0]
        keep.append(i)
        if order.size == 1:
            break
        overlaps = iou_matrix(boxes[i], boxes[order[1:]])[0]
        order = order[1:][overlaps <= iou_thresh]
    return np.asarray(keep, dtype=np.int64)
