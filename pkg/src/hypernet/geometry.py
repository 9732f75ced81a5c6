"""Boxes, IoU, box-delta parameterisation, greedy NMS and dense candidate boxes.

Boxes are ``(x_min, y_min, x_max, y_max)`` in continuous pixel coordinates,
width = x_max - x_min.  Vectorised functions take ``(N, 4)`` arrays.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np

DELTA_CLAMP = 4.0


class Box(NamedTuple):
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    @property
    def width(self):
        return self.x_max - self.x_min

    @property
    def height(self):
        return self.y_max - self.y_min

    @property
    def center(self):
        return (0.5 * (self.x_min + self.x_max), 0.5 * (self.y_min + self.y_max))

    def is_valid(self):
        return self.x_max > self.x_min and self.y_max > self.y_min

    @classmethod
    def from_center(cls, cx, cy, w, h):
        return cls(cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2)


class BoxDelta(NamedTuple):
    t_x: float
    t_y: float
    t_w: float
    t_h: float


@dataclass(frozen=True)
class ScoredBox:
    box: Box
    score: float
    class_id: Optional[int] = None


def as_boxes(boxes):
    arr = np.asarray(boxes, dtype=np.float64)
    return arr.reshape(-1, 4)


def areas(boxes):
    boxes = np.asarray(boxes)
    return (boxes[..., 2] - boxes[..., 0]) * (boxes[..., 3] - boxes[..., 1])


def iou_matrix(a, b):
    """Pairwise IoU between ``(N, 4)`` and ``(M, 4)`` arrays -> ``(N, M)``."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    union = areas(a)[:, None] + areas(b)[None, :] - inter
    return np.where(inter > 0, inter / np.where(union > 0, union, 1), 0.0)


def iou(a, b):
    """IoU of two single boxes."""
    return float(iou_matrix(a, b)[0, 0])


def _center_size(boxes):
    w = boxes[:, 2] - boxes[:, 0]
    h = boxes[:, 3] - boxes[:, 1]
    return boxes[:, 0] + 0.5 * w, boxes[:, 1] + 0.5 * h, w, h


def encode(proposals, targets):
    """Regression targets mapping ``proposals`` onto ``targets``.

    t_x = (G_x - P_x) / P_w, t_y = (G_y - P_y) / P_h,
    t_w = log(G_w / P_w),   t_h = log(G_h / P_h)   (centre/size coordinates)
    """
    single = np.ndim(proposals) == 1
    p = as_boxes(proposals)
    g = as_boxes(targets)
    px, py, pw, ph = _center_size(p)
    gx, gy, gw, gh = _center_size(g)
    d = np.stack([(gx - px) / pw, (gy - py) / ph, np.log(gw / pw), np.log(gh / ph)], axis=1)
    return BoxDelta(*d[0]) if single else d


def clip_boxes(boxes, bounds):
    """Clip to ``bounds`` given as a box (x_min, y_min, x_max, y_max)."""
    b = np.asarray(boxes, dtype=np.float64).copy()
    x0, y0, x1, y1 = bounds
    b[..., 0::2] = np.clip(b[..., 0::2], x0, x1)
    b[..., 1::2] = np.clip(b[..., 1::2], y0, y1)
    return b


def decode(proposals, deltas, bounds=None):
    """Apply deltas to proposals (inverse of :func:`encode`).

    ``t_w`` and ``t_h`` are clamped to +-4 before exponentiation.
    """
    single = np.ndim(proposals) == 1
    p = as_boxes(proposals)
    d = np.asarray(deltas, dtype=np.float64).reshape(-1, 4)
    _, _, pw, ph = _center_size(p)
    # edge form of G = (t_x*P_w + P_x, ..., P_w*exp(t_w), ...): exact for zero deltas
    shift_x = d[:, 0] * pw
    shift_y = d[:, 1] * ph
    grow_x = 0.5 * pw * np.expm1(np.clip(d[:, 2], -DELTA_CLAMP, DELTA_CLAMP))
    grow_y = 0.5 * ph * np.expm1(np.clip(d[:, 3], -DELTA_CLAMP, DELTA_CLAMP))
    out = np.stack([p[:, 0] + shift_x - grow_x, p[:, 1] + shift_y - grow_y,
                    p[:, 2] + shift_x + grow_x, p[:, 3] + shift_y + grow_y], axis=1)
    if bounds is not None:
        out = clip_boxes(out, bounds)
    return Box(*out[0]) if single else out


def score_order(scores):
    """Indices sorted by score descending, ties by original index ascending."""
    scores = np.asarray(scores)
    return np.lexsort((np.arange(len(scores)), -scores))


def nms(boxes, scores, iou_threshold, max_output=None):
    """Greedy non-maximum suppression.

    Walks boxes in :func:`score_order` and keeps one iff its IoU with every
    already-kept box is <= ``iou_threshold``.  Returns kept indices in kept
    order.  ``max_output`` stops early; the result is the prefix of the full run.
    """
    if not 0 < iou_threshold <= 1:
        raise ValueError("iou_threshold must be in (0, 1]")
    boxes = as_boxes(boxes)
    order = score_order(scores)
    x0, y0, x1, y1 = boxes[:, 0], boxes[:, 1], boxes[:, 2], boxes[:, 3]
    area = (x1 - x0) * (y1 - y0)
    keep = []
    limit = len(order) if max_output is None else max_output
    while order.size and len(keep) < limit:
        i = order[0]
        keep.append(int(i))
        rest = order[1:]
        iw = np.minimum(x1[i], x1[rest]) - np.maximum(x0[i], x0[rest])
        ih = np.minimum(y1[i], y1[rest]) - np.maximum(y0[i], y0[rest])
        inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
        union = area[i] + area[rest] - inter
        ov = np.where(inter > 0, inter / np.where(union > 0, union, 1), 0.0)
        order = rest[ov <= iou_threshold]
    return np.asarray(keep, dtype=np.int64)


def nms_scored(items, iou_threshold):
    """NMS over a list of :class:`ScoredBox`."""
    if not items:
        return []
    keep = nms([tuple(s.box) for s in items], [s.score for s in items], iou_threshold)
    return [items[i] for i in keep]


def anchor_shapes(scales, ratios):
    """(width, height) per (scale, ratio) pair, scale-major."""
    shapes = []
    for s in scales:
        for r in ratios:
            shapes.append((s * np.sqrt(r), s / np.sqrt(r)))
    return np.asarray(shapes, dtype=np.float64)


def generate_candidates(grid_h, grid_w, stride, scales, ratios, image_bounds=None,
                        origin=(0, 0), return_index=False):
    """Dense candidate boxes: one per (cell, scale, ratio).

    Centres sit at ``((col + 0.5) * stride, (row + 0.5) * stride)`` offset by
    ``origin`` cells.  With ``image_bounds`` the boxes are clipped and those
    left with zero area dropped.  Order is row-major over cells, then scale,
    then ratio.
    """
    if not len(scales) or not len(ratios):
        raise ValueError("scales and ratios must be nonempty")
    shapes = anchor_shapes(scales, ratios)
    rows = (np.arange(grid_h) + origin[0] + 0.5) * stride
    cols = (np.arange(grid_w) + origin[1] + 0.5) * stride
    cy, cx = np.meshgrid(rows, cols, indexing="ij")
    cx = cx.reshape(-1, 1)
    cy = cy.reshape(-1, 1)
    w = shapes[None, :, 0]
    h = shapes[None, :, 1]
    boxes = np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=-1).reshape(-1, 4)
    index = np.arange(len(boxes))
    if image_bounds is not None:
        boxes = clip_boxes(boxes, image_bounds)
        ok = (boxes[:, 2] > boxes[:, 0]) & (boxes[:, 3] > boxes[:, 1])
        boxes, index = boxes[ok], index[ok]
    return (boxes, index) if return_index else boxes
