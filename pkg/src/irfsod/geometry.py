"""Axis-aligned box algebra: IoU, delta encoding, clipping, and NMS.

Boxes use the corner convention (x1, y1, x2, y2) with x2 > x1 and y2 > y1,
in pixel units. COCO-style (x, y, w, h) boxes are converted at the data
boundary, never here. All functions are pure; the vectorized variants
operate on float64 ``(N, 4)`` arrays.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

# Overflow guard for exp(dw)/exp(dh) when decoding regression deltas.
LOG_RATIO_CLAMP = math.log(1000.0 / 16.0)


@dataclass(frozen=True)
class Box:
    """An axis-aligned box with corners (x1, y1), (x2, y2)."""

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        coords = (self.x1, self.y1, self.x2, self.y2)
        if not all(math.isfinite(c) for c in coords):
            raise ValueError(f"box coordinates must be finite, got {coords}")
        if not (self.x2 > self.x1 and self.y2 > self.y1):
            raise ValueError(f"degenerate box: {coords}")

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))

    def to_array(self) -> np.ndarray:
        return np.array([self.x1, self.y1, self.x2, self.y2], dtype=np.float64)

    @classmethod
    def from_array(cls, arr) -> "Box":
        x1, y1, x2, y2 = (float(v) for v in arr)
        return cls(x1, y1, x2, y2)

    @classmethod
    def from_xywh(cls, x: float, y: float, w: float, h: float) -> "Box":
        return cls(x, y, x + w, y + h)

    def to_xywh(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.width, self.height)


@dataclass(frozen=True)
class BoxDelta:
    """Center/size regression offsets relative to an anchor.

    dx, dy are center offsets normalized by the anchor width/height; dw, dh
    are log-scale size ratios.
    """

    dx: float
    dy: float
    dw: float
    dh: float

    def __post_init__(self):
        if not all(math.isfinite(v) for v in (self.dx, self.dy, self.dw, self.dh)):
            raise ValueError("box delta must be finite")

    def to_array(self) -> np.ndarray:
        return np.array([self.dx, self.dy, self.dw, self.dh], dtype=np.float64)

    @classmethod
    def from_array(cls, arr) -> "BoxDelta":
        dx, dy, dw, dh = (float(v) for v in arr)
        return cls(dx, dy, dw, dh)


@dataclass(frozen=True)
class Detection:
    """A scored class prediction with its box."""

    box: Box
    category: int
    score: float

    def __post_init__(self):
        if not (math.isfinite(self.score) and 0.0 <= self.score <= 1.0):
            raise ValueError(f"score must be in [0, 1], got {self.score}")


def boxes_to_array(boxes) -> np.ndarray:
    """Stack Box objects (or 4-sequences) into a float64 (N, 4) array."""
    if len(boxes) == 0:
        return np.zeros((0, 4), dtype=np.float64)
    rows = [b.to_array() if isinstance(b, Box) else np.asarray(b, dtype=np.float64) for b in boxes]
    return np.stack(rows)


def iou_matrix(boxes1: np.ndarray, boxes2: np.ndarray) -> np.ndarray:
    """Pairwise IoU between two corner-format box arrays, shaped (N, M).

    Exact on valid boxes: identical boxes give 1.0, disjoint boxes give 0.0.
    """
    boxes1 = np.asarray(boxes1, dtype=np.float64).reshape(-1, 4)
    boxes2 = np.asarray(boxes2, dtype=np.float64).reshape(-1, 4)
    tl = np.maximum(boxes1[:, None, 0:2], boxes2[None, :, 0:2])
    br = np.minimum(boxes1[:, None, 2:4], boxes2[None, :, 2:4])
    wh = np.clip(br - tl, 0.0, None)
    inter = wh[..., 0] * wh[..., 1]
    area1 = (boxes1[:, 2] - boxes1[:, 0]) * (boxes1[:, 3] - boxes1[:, 1])
    area2 = (boxes2[:, 2] - boxes2[:, 0]) * (boxes2[:, 3] - boxes2[:, 1])
    union = area1[:, None] + area2[None, :] - inter
    # Valid boxes have positive area, so union > 0 whenever inputs are valid.
    return np.where(inter > 0.0, inter / union, 0.0)


def iou(a: Box, b: Box) -> float:
    """IoU of two boxes, in [0, 1]. Symmetric; 1 iff identical."""
    return float(iou_matrix(a.to_array(), b.to_array())[0, 0])


def encode_deltas(targets: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    """Encode target boxes as (dx, dy, dw, dh) relative to anchors.

    dx = (tcx - acx) / aw, dy = (tcy - acy) / ah,
    dw = log(tw / aw),     dh = log(th / ah).
    """
    targets = np.asarray(targets, dtype=np.float64).reshape(-1, 4)
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    aw = anchors[:, 2] - anchors[:, 0]
    ah = anchors[:, 3] - anchors[:, 1]
    if np.any(aw <= 0.0) or np.any(ah <= 0.0):
        raise ValueError("anchors must have positive width and height")
    acx = anchors[:, 0] + 0.5 * aw
    acy = anchors[:, 1] + 0.5 * ah
    tw = targets[:, 2] - targets[:, 0]
    th = targets[:, 3] - targets[:, 1]
    tcx = targets[:, 0] + 0.5 * tw
    tcy = targets[:, 1] + 0.5 * th
    dx = (tcx - acx) / aw
    dy = (tcy - acy) / ah
    dw = np.log(tw / aw)
    dh = np.log(th / ah)
    return np.stack([dx, dy, dw, dh], axis=1)


def decode_deltas(anchors: np.ndarray, deltas: np.ndarray,
                  clamp: float = LOG_RATIO_CLAMP) -> np.ndarray:
    """Apply (dx, dy, dw, dh) offsets to anchors, returning corner boxes.

    dw/dh are clamped to ±clamp before exponentiation so the output stays
    finite for arbitrary regression outputs.
    """
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    deltas = np.asarray(deltas, dtype=np.float64).reshape(-1, 4)
    aw = anchors[:, 2] - anchors[:, 0]
    ah = anchors[:, 3] - anchors[:, 1]
    if np.any(aw <= 0.0) or np.any(ah <= 0.0):
        raise ValueError("anchors must have positive width and height")
    acx = anchors[:, 0] + 0.5 * aw
    acy = anchors[:, 1] + 0.5 * ah
    cx = deltas[:, 0] * aw + acx
    cy = deltas[:, 1] * ah + acy
    w = np.exp(np.clip(deltas[:, 2], -clamp, clamp)) * aw
    h = np.exp(np.clip(deltas[:, 3], -clamp, clamp)) * ah
    return np.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], axis=1)


def encode_delta(target: Box, anchor: Box) -> BoxDelta:
    """Encode a single target box relative to a single anchor."""
    return BoxDelta.from_array(encode_deltas(target.to_array(), anchor.to_array())[0])


def decode_delta(anchor: Box, delta: BoxDelta, clamp: float = LOG_RATIO_CLAMP) -> Box:
    """Decode a single delta against a single anchor."""
    return Box.from_array(decode_deltas(anchor.to_array(), delta.to_array(), clamp=clamp)[0])


def clip_boxes(boxes: np.ndarray, width: float, height: float,
               min_size: float = 1e-3) -> np.ndarray:
    """Clip boxes to [0, width] x [0, height], preserving validity.

    Boxes squashed flat against an image edge are kept min_size wide/tall so
    the corner-convention invariants still hold downstream.
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4).copy()
    boxes[:, 0] = np.clip(boxes[:, 0], 0.0, width - min_size)
    boxes[:, 1] = np.clip(boxes[:, 1], 0.0, height - min_size)
    boxes[:, 2] = np.clip(boxes[:, 2], min_size, width)
    boxes[:, 3] = np.clip(boxes[:, 3], min_size, height)
    boxes[:, 2] = np.maximum(boxes[:, 2], boxes[:, 0] + min_size)
    boxes[:, 3] = np.maximum(boxes[:, 3], boxes[:, 1] + min_size)
    return boxes


def nms_indices(boxes: np.ndarray, scores: np.ndarray, iou_threshold: float,
                max_keep: int | None = None) -> list[int]:
    """Greedy class-agnostic NMS; returns kept indices by descending score.

    Ties on equal scores are broken by lower input index (stable sort), so
    the output is deterministic for any input. Overlaps are computed one
    row at a time against the surviving candidates, not as a full matrix;
    max_keep stops early once that many boxes are kept (greedy semantics
    make the truncated result identical to truncating afterwards).
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    if boxes.shape[0] == 0:
        return []
    order = np.argsort(-scores, kind="stable")
    x1, y1, x2, y2 = boxes[:, 0], boxes[:, 1], boxes[:, 2], boxes[:, 3]
    areas = (x2 - x1) * (y2 - y1)
    kept: list[int] = []
    while order.size > 0:
        i = int(order[0])
        kept.append(i)
        if max_keep is not None and len(kept) >= max_keep:
            break
        rest = order[1:]
        iw = np.clip(np.minimum(x2[i], x2[rest]) - np.maximum(x1[i], x1[rest]), 0.0, None)
        ih = np.clip(np.minimum(y2[i], y2[rest]) - np.maximum(y1[i], y1[rest]), 0.0, None)
        inter = iw * ih
        ious = np.where(inter > 0.0, inter / (areas[i] + areas[rest] - inter), 0.0)
        order = rest[ious <= iou_threshold]
    return kept


def nms(detections: list[Detection], iou_threshold: float) -> list[Detection]:
    """Per-category greedy NMS over scored detections.

    Output is sorted by descending score; among kept boxes of the same
    category no pair overlaps above the threshold.
    """
    if not detections:
        return []
    kept: list[tuple[float, int, Detection]] = []
    by_category: dict[int, list[tuple[int, Detection]]] = {}
    for i, det in enumerate(detections):
        by_category.setdefault(det.category, []).append((i, det))
    for _, members in by_category.items():
        boxes = boxes_to_array([d.box for _, d in members])
        scores = np.array([d.score for _, d in members], dtype=np.float64)
        for k in nms_indices(boxes, scores, iou_threshold):
            orig_idx, det = members[k]
            kept.append((-det.score, orig_idx, det))
    kept.sort(key=lambda t: (t[0], t[1]))
    return [det for _, _, det in kept]
