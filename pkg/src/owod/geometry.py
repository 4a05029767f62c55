"""Axis-aligned box conversions and overlap measures.

Boxes are numpy arrays of shape (..., 4). The canonical form is
center-size (cx, cy, w, h); corner form (x1, y1, x2, y2) is derived.
All functions broadcast over leading dimensions.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "to_corners",
    "to_center",
    "box_area",
    "box_iou",
    "box_giou",
    "iou_matrix",
    "giou_matrix",
]


def _validate_center(boxes: np.ndarray) -> np.ndarray:
    boxes = np.asarray(boxes, dtype=np.float64)
    if boxes.shape[-1] != 4:
        raise ValueError(f"expected last dimension 4, got shape {boxes.shape}")
    if not np.all(np.isfinite(boxes)):
        raise ValueError("box coordinates must be finite")
    if np.any(boxes[..., 2:] < 0):
        raise ValueError("box width/height must be non-negative")
    return boxes


def _validate_corners(boxes: np.ndarray) -> np.ndarray:
    boxes = np.asarray(boxes, dtype=np.float64)
    if boxes.shape[-1] != 4:
        raise ValueError(f"expected last dimension 4, got shape {boxes.shape}")
    if not np.all(np.isfinite(boxes)):
        raise ValueError("box coordinates must be finite")
    if np.any(boxes[..., 2] < boxes[..., 0]) or np.any(boxes[..., 3] < boxes[..., 1]):
        raise ValueError("corner boxes must satisfy x1 <= x2 and y1 <= y2")
    return boxes


def to_corners(boxes: np.ndarray) -> np.ndarray:
    """Convert (cx, cy, w, h) boxes to (x1, y1, x2, y2)."""
    b = _validate_center(boxes)
    cx, cy, w, h = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=-1)


def to_center(boxes: np.ndarray) -> np.ndarray:
    """Convert (x1, y1, x2, y2) boxes to (cx, cy, w, h)."""
    b = _validate_corners(boxes)
    x1, y1, x2, y2 = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return np.stack([(x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1], axis=-1)


def box_area(boxes: np.ndarray) -> np.ndarray:
    """Area of center-size boxes."""
    b = _validate_center(boxes)
    return b[..., 2] * b[..., 3]


def box_iou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Elementwise IoU of center-size boxes.

    Two zero-area boxes have IoU 0 by convention so downstream metric
    code never sees NaN.
    """
    ca, cb = to_corners(a), to_corners(b)
    lt = np.maximum(ca[..., :2], cb[..., :2])
    rb = np.minimum(ca[..., 2:], cb[..., 2:])
    wh = np.clip(rb - lt, 0.0, None)
    inter = wh[..., 0] * wh[..., 1]
    union = box_area(a) + box_area(b) - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def box_giou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Elementwise generalized IoU: iou - (hull - union) / hull.

    Raises if the smallest enclosing box of any pair has zero area.
    """
    ca, cb = to_corners(a), to_corners(b)
    lt = np.maximum(ca[..., :2], cb[..., :2])
    rb = np.minimum(ca[..., 2:], cb[..., 2:])
    wh = np.clip(rb - lt, 0.0, None)
    inter = wh[..., 0] * wh[..., 1]
    union = box_area(a) + box_area(b) - inter

    hlt = np.minimum(ca[..., :2], cb[..., :2])
    hrb = np.maximum(ca[..., 2:], cb[..., 2:])
    hull = (hrb[..., 0] - hlt[..., 0]) * (hrb[..., 1] - hlt[..., 1])
    if np.any(hull <= 0):
        raise ValueError("enclosing box has zero area")
    iou = np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)
    return iou - (hull - union) / hull


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between (N, 4) and (M, 4) center-size boxes -> (N, M)."""
    a = _validate_center(a).reshape(-1, 4)
    b = _validate_center(b).reshape(-1, 4)
    return box_iou(a[:, None, :], b[None, :, :])


def giou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise gIoU between (N, 4) and (M, 4) center-size boxes -> (N, M)."""
    a = _validate_center(a).reshape(-1, 4)
    b = _validate_center(b).reshape(-1, 4)
    return box_giou(a[:, None, :], b[None, :, :])
