"""Dynamic ROI max pooling (forward + backward).

A box is mapped to feature coordinates by dividing by the feature stride,
then quantised outward (floor on the start, ceil on the end) and clamped to
the map.  Bin ``b`` of a span of length ``L`` split into ``B`` bins covers
``[floor(b*L/B), ceil((b+1)*L/B))`` so no bin is ever empty; boxes smaller
than the bin grid simply replicate cells.

The forward pass answers every bin with a 2-D sparse table (max over
power-of-two windows), four lookups per bin.  Ties resolve to the lowest
linear index, matching a naive row-major scan.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import Box


@dataclass(frozen=True)
class RoiSpec:
    box: Box
    feature_stride: float
    bins_h: int = 13
    bins_w: int = 13

    def __post_init__(self):
        if self.bins_h < 1 or self.bins_w < 1 or self.feature_stride <= 0:
            raise ValueError("bins must be >= 1 and feature_stride > 0")


def quantize_rois(boxes, feature_stride, feat_h, feat_w):
    """Integer feature-cell extents ``(y0, y1, x0, x1)`` per box, end-exclusive."""
    b = np.asarray(boxes, dtype=np.float64).reshape(-1, 4) / feature_stride
    x0 = np.clip(np.floor(b[:, 0]), 0, feat_w).astype(np.int64)
    y0 = np.clip(np.floor(b[:, 1]), 0, feat_h).astype(np.int64)
    x1 = np.clip(np.ceil(b[:, 2]), 0, feat_w).astype(np.int64)
    y1 = np.clip(np.ceil(b[:, 3]), 0, feat_h).astype(np.int64)
    bad = (x1 <= x0) | (y1 <= y0)
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        raise ValueError(f"roi {i} {np.asarray(boxes).reshape(-1, 4)[i].tolist()} lies outside the feature map")
    return y0, y1, x0, x1


def bin_edges(start, stop, bins):
    """Per-bin ``[lo, hi)`` cell ranges for spans ``[start, stop)`` -> two ``(N, bins)`` arrays."""
    length = (stop - start)[:, None]
    b = np.arange(bins)[None, :]
    lo = start[:, None] + (b * length) // bins
    hi = start[:, None] - ((-(b + 1) * length) // bins)  # ceil division
    return lo, hi


def _combine(v1, i1, v2, i2):
    take = (v2 > v1) | ((v2 == v1) & (i2 < i1))
    return np.where(take, v2, v1), np.where(take, i2, i1)


class RangeMaxTable:
    """2-D sparse table of window maxima (and their argmax) over a (C, H, W) map."""

    def __init__(self, features, max_h=None, max_w=None):
        c, h, w = features.shape
        self.shape = features.shape
        self.levels_h = int(np.floor(np.log2(max(1, min(h, max_h or h))))) + 1
        self.levels_w = int(np.floor(np.log2(max(1, min(w, max_w or w))))) + 1
        flat_idx = np.arange(h * w, dtype=np.int32).reshape(h, w)
        vals = np.empty((self.levels_h, self.levels_w, c, h, w), dtype=features.dtype)
        idxs = np.empty((self.levels_h, self.levels_w, c, h, w), dtype=np.int32)
        vals[0, 0] = features
        idxs[0, 0] = flat_idx
        for kw in range(1, self.levels_w):
            s = 1 << (kw - 1)
            vals[0, kw], idxs[0, kw] = vals[0, kw - 1], idxs[0, kw - 1]
            v, i = _combine(vals[0, kw - 1][..., :-s], idxs[0, kw - 1][..., :-s],
                            vals[0, kw - 1][..., s:], idxs[0, kw - 1][..., s:])
            vals[0, kw][..., :-s], idxs[0, kw][..., :-s] = v, i
        for kh in range(1, self.levels_h):
            s = 1 << (kh - 1)
            vals[kh], idxs[kh] = vals[kh - 1], idxs[kh - 1]
            v, i = _combine(vals[kh - 1][:, :, :-s], idxs[kh - 1][:, :, :-s],
                            vals[kh - 1][:, :, s:], idxs[kh - 1][:, :, s:])
            vals[kh][:, :, :-s], idxs[kh][:, :, :-s] = v, i
        # (C, levels_h*levels_w*H*W) so one gather per lookup covers every channel
        self.vals = np.ascontiguousarray(vals.transpose(2, 0, 1, 3, 4).reshape(c, -1))
        self.idxs = np.ascontiguousarray(idxs.transpose(2, 0, 1, 3, 4).reshape(c, -1))

    def query(self, y0, y1, x0, x1, with_argmax=True):
        """Max over ``[y0, y1) x [x0, x1)`` for broadcastable integer arrays.

        Returns values shaped ``(C,) + broadcast shape`` and optionally argmax.
        """
        _, h, w = self.shape
        y0, y1, x0, x1 = np.broadcast_arrays(y0, y1, x0, x1)
        kh = np.floor(np.log2(y1 - y0)).astype(np.int64)
        kw = np.floor(np.log2(x1 - x0)).astype(np.int64)
        if kh.max(initial=0) >= self.levels_h or kw.max(initial=0) >= self.levels_w:
            raise ValueError("query window exceeds table levels")
        base = (kh * self.levels_w + kw) * (h * w)
        ya, yb = y0, y1 - (1 << kh)
        xa, xb = x0, x1 - (1 << kw)
        best_v = best_i = None
        for yy, xx in ((ya, xa), (ya, xb), (yb, xa), (yb, xb)):
            pos = (base + yy * w + xx).ravel()
            v = np.take(self.vals, pos, axis=1)
            if with_argmax:
                i = np.take(self.idxs, pos, axis=1)
                if best_v is None:
                    best_v, best_i = v, i
                else:
                    best_v, best_i = _combine(best_v, best_i, v, i)
            else:
                best_v = v if best_v is None else np.maximum(best_v, v)
        shape = (self.shape[0],) + y0.shape
        best_v = best_v.reshape(shape)
        if with_argmax:
            return best_v, best_i.reshape(shape)
        return best_v


def roi_pool_forward(features, boxes, feature_stride, bins=(13, 13), with_argmax=True, table=None):
    """Pool each box of ``boxes`` (``(R, 4)`` image coordinates) from ``features`` (C, H, W).

    Returns ``(R, C, bins_h, bins_w)`` maxima and, if requested, the flat
    ``h*W + w`` argmax per output cell.
    """
    c, h, w = features.shape
    bh, bw = bins
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    y0, y1, x0, x1 = quantize_rois(boxes, feature_stride, h, w)
    ylo, yhi = bin_edges(y0, y1, bh)
    xlo, xhi = bin_edges(x0, x1, bw)
    if table is None:
        table = RangeMaxTable(features)
    res = table.query(ylo[:, :, None], yhi[:, :, None], xlo[:, None, :], xhi[:, None, :],
                      with_argmax=with_argmax)
    if with_argmax:
        out, arg = res
        return out.transpose(1, 0, 2, 3), arg.transpose(1, 0, 2, 3)
    return res.transpose(1, 0, 2, 3)


def roi_pool_single(features, roi: RoiSpec):
    out, arg = roi_pool_forward(features, [tuple(roi.box)], roi.feature_stride, (roi.bins_h, roi.bins_w))
    return out[0], arg[0]


def roi_pool_backward(grad_output, argmax, feature_shape):
    """Scatter ``(R, C, bh, bw)`` gradients onto a ``(C, H, W)`` map, summing over ROIs."""
    c, h, w = feature_shape
    r = grad_output.shape[0]
    if grad_output.shape != argmax.shape or grad_output.shape[1] != c:
        raise ValueError("grad_output / argmax / feature_shape mismatch")
    chan = np.arange(c).reshape(1, c, 1, 1) * (h * w)
    flat = np.bincount((argmax + chan).ravel(), weights=grad_output.ravel(), minlength=c * h * w)
    return flat.reshape(c, h, w).astype(grad_output.dtype, copy=False)


def roi_pool_naive(features, boxes, feature_stride, bins=(13, 13)):
    """Reference implementation: explicit per-bin scan.  Used as a test oracle."""
    c, h, w = features.shape
    bh, bw = bins
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    out = np.empty((len(boxes), c, bh, bw), dtype=features.dtype)
    arg = np.empty((len(boxes), c, bh, bw), dtype=np.int64)
    for r, (bx0, by0, bx1, by1) in enumerate(boxes):
        xs = min(max(int(np.floor(bx0 / feature_stride)), 0), w)
        ys = min(max(int(np.floor(by0 / feature_stride)), 0), h)
        xe = min(max(int(np.ceil(bx1 / feature_stride)), 0), w)
        ye = min(max(int(np.ceil(by1 / feature_stride)), 0), h)
        if xe <= xs or ye <= ys:
            raise ValueError("roi outside feature map")
        lh, lw = ye - ys, xe - xs
        for i in range(bh):
            r0 = ys + (i * lh) // bh
            r1 = ys + -(-(i + 1) * lh // bh)
            for j in range(bw):
                c0 = xs + (j * lw) // bw
                c1 = xs + -(-(j + 1) * lw // bw)
                for ch in range(c):
                    best, best_i = -np.inf, -1
                    for yy in range(r0, r1):
                        for xx in range(c0, c1):
                            v = features[ch, yy, xx]
                            if v > best:
                                best, best_i = v, yy * w + xx
                    out[r, ch, i, j] = best
                    arg[r, ch, i, j] = best_i
    return out, arg
