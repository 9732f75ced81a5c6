"""Proposal and detection heads on top of the Hyper Feature.

Both heads share one structure: a 3x3 conv, ROI max pooling, an FC stack and
two sibling outputs (class scores, box offsets).  The ``basic`` arrangement
pools the Hyper Feature and convolves every pooled region; the ``sp``
arrangement convolves the whole Hyper Feature once and pools the (much
thinner) result, so per-region work is FC-only.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

from . import numerics as nm
from .config import DetectionHeadConfig, ProposalHeadConfig
from .geometry import Box, decode, nms
from .roi_ops import RangeMaxTable, roi_pool_backward, roi_pool_forward


@dataclass(frozen=True)
class HeadSpec:
    prefix: str
    variant: str
    in_channels: int
    conv_channels: int
    conv_kernel: int
    bins: Tuple[int, int]
    fc_widths: Tuple[int, ...]
    dropout: float
    n_cls: int
    n_reg: int

    @property
    def flat_width(self):
        return self.conv_channels * self.bins[0] * self.bins[1]


def proposal_spec(cfg: ProposalHeadConfig, in_channels):
    return HeadSpec("proposal", cfg.variant, in_channels, cfg.conv_channels, cfg.conv_kernel,
                    tuple(cfg.bins), (cfg.fc_width,), 0.0, 2, 4)


def detection_spec(cfg: DetectionHeadConfig, in_channels):
    return HeadSpec("detection", cfg.variant, in_channels, cfg.conv_channels, cfg.conv_kernel,
                    tuple(cfg.bins), tuple(cfg.fc_widths), cfg.dropout,
                    cfg.num_classes + 1, 4 * cfg.num_classes)


def init_head_params(spec: HeadSpec, init, dtype=np.float32):
    p = spec.prefix
    k = spec.conv_kernel
    params = {f"{p}.conv": nm.LayerParams(
        weight=init((spec.conv_channels, spec.in_channels, k, k)).astype(dtype),
        bias=np.zeros(spec.conv_channels, dtype))}
    width = spec.flat_width
    for i, w in enumerate(spec.fc_widths):
        params[f"{p}.fc{i + 1}"] = nm.LayerParams(weight=init((w, width)).astype(dtype), bias=np.zeros(w, dtype))
        width = w
    params[f"{p}.cls"] = nm.LayerParams(weight=init((spec.n_cls, width)).astype(dtype), bias=np.zeros(spec.n_cls, dtype))
    params[f"{p}.reg"] = nm.LayerParams(weight=init((spec.n_reg, width)).astype(dtype), bias=np.zeros(spec.n_reg, dtype))
    return params


def _fc_stack(x, params, spec, training, rng):
    cache = []
    for i in range(len(spec.fc_widths)):
        lp = params[f"{spec.prefix}.fc{i + 1}"]
        h = nm.fc_forward(x, lp)
        r = nm.relu_forward(h)
        d, mask = nm.dropout_forward(r, spec.dropout, rng, training)
        cache.append((x, h, mask))
        x = d
    cls = nm.fc_forward(x, params[f"{spec.prefix}.cls"])
    reg = nm.fc_forward(x, params[f"{spec.prefix}.reg"])
    return cls, reg, (cache, x)


def _fc_stack_backward(cache, g_cls, g_reg, params, spec):
    layers, top = cache
    g = nm.fc_backward(top, params[f"{spec.prefix}.cls"], g_cls)
    g = g + nm.fc_backward(top, params[f"{spec.prefix}.reg"], g_reg)
    for i in reversed(range(len(layers))):
        x, h, mask = layers[i]
        g = nm.dropout_backward(g, mask)
        g = nm.relu_backward(h, g)
        g = nm.fc_backward(x, params[f"{spec.prefix}.fc{i + 1}"], g)
    return g


def sp_feature(hyper, params, spec):
    """SP pre-pooling conv on the whole Hyper Feature -> ``(activation, pre-activation)``."""
    z = nm.conv2d_forward(hyper, params[f"{spec.prefix}.conv"], 1, spec.conv_kernel // 2)
    return nm.relu_forward(z), z


def head_forward(hyper, boxes, params, spec: HeadSpec, feature_stride, training=False, rng=None):
    """Score and regress ``boxes`` (``(R, 4)``).  Returns ``(cls_logits, offsets, cache)``."""
    pad = spec.conv_kernel // 2
    conv = params[f"{spec.prefix}.conv"]
    if spec.variant == "sp":
        a, z = sp_feature(hyper, params, spec)
        pooled, arg = roi_pool_forward(a, boxes, feature_stride, spec.bins)
        flat = pooled.reshape(len(pooled), -1)
        front = (z, a, arg)
    else:
        pooled, arg = roi_pool_forward(hyper, boxes, feature_stride, spec.bins)
        z = nm.conv2d_forward(pooled, conv, 1, pad)
        a = nm.relu_forward(z)
        flat = a.reshape(len(a), -1)
        front = (pooled, arg, z)
    cls, reg, fc_cache = _fc_stack(flat, params, spec, training, rng)
    return cls, reg, (hyper, front, fc_cache)


def head_backward(cache, g_cls, g_reg, params, spec: HeadSpec):
    """Backward through the FC stack, conv and ROI pooling; returns the Hyper Feature gradient."""
    hyper, front, fc_cache = cache
    pad = spec.conv_kernel // 2
    conv = params[f"{spec.prefix}.conv"]
    g = _fc_stack_backward(fc_cache, g_cls, g_reg, params, spec)
    bh, bw = spec.bins
    g = g.reshape(len(g), spec.conv_channels, bh, bw)
    if spec.variant == "sp":
        z, a, arg = front
        g = roi_pool_backward(g, arg, a.shape)
        g = nm.relu_backward(z, g)
        return nm.conv2d_backward(hyper, conv, g, 1, pad)
    pooled, arg, z = front
    g = nm.relu_backward(z, g)
    g = nm.conv2d_backward(pooled, conv, g, 1, pad)
    return roi_pool_backward(g, arg, hyper.shape)


def head_infer(hyper, boxes, params, spec: HeadSpec, feature_stride, chunk=None):
    """Inference-only scoring of many boxes, chunked, with no caches kept."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    if spec.variant == "sp":
        source, _ = sp_feature(hyper, params, spec)
        chunk = chunk or 4096
    else:
        source = hyper
        chunk = chunk or 256
    table = RangeMaxTable(source)
    conv = params[f"{spec.prefix}.conv"]
    pad = spec.conv_kernel // 2
    cls_out = np.empty((len(boxes), spec.n_cls), dtype=hyper.dtype)
    reg_out = np.empty((len(boxes), spec.n_reg), dtype=hyper.dtype)
    for s in range(0, len(boxes), chunk):
        pooled = roi_pool_forward(source, boxes[s : s + chunk], feature_stride, spec.bins,
                                  with_argmax=False, table=table)
        if spec.variant != "sp":
            pooled = nm.relu_forward(nm.conv2d_forward(pooled, conv, 1, pad))
        cls, reg, _ = _fc_stack(pooled.reshape(len(pooled), -1), params, spec, False, None)
        cls_out[s : s + chunk] = cls
        reg_out[s : s + chunk] = reg
    return cls_out, reg_out


@dataclass(frozen=True)
class Detection:
    box: Box
    class_id: int
    score: float


def select_proposals(candidates, logits, offsets, cfg: ProposalHeadConfig, image_bounds, top_k):
    """Objectness softmax, decode, drop tiny boxes, NMS, keep the top ``top_k``."""
    scores = nm.softmax(logits.astype(np.float64))[:, 1]
    boxes = decode(candidates, offsets, bounds=image_bounds)
    ok = ((boxes[:, 2] - boxes[:, 0]) >= cfg.min_size) & ((boxes[:, 3] - boxes[:, 1]) >= cfg.min_size)
    boxes, scores = boxes[ok], scores[ok]
    if not len(boxes):
        return boxes, scores
    keep = nms(boxes, scores, cfg.nms_threshold, max_output=top_k)
    return boxes[keep], scores[keep]


def propose(hyper, candidates, params, cfg: ProposalHeadConfig, feature_stride, image_bounds,
            mode="test", top_k=None):
    """Region proposals as ``(boxes (K, 4), scores (K,))`` sorted by score."""
    if not len(candidates):
        raise ValueError("no candidate boxes")
    if top_k is None:
        top_k = cfg.top_k_train if mode == "train" else cfg.top_k_test
    spec = proposal_spec(cfg, hyper.shape[0])
    logits, offsets = head_infer(hyper, candidates, params, spec, feature_stride)
    return select_proposals(candidates, logits, offsets, cfg, image_bounds, top_k)


def select_detections(proposals, logits, offsets, cfg: DetectionHeadConfig, image_bounds) -> List[Detection]:
    probs = nm.softmax(logits.astype(np.float64))
    dets = []
    for c in range(1, cfg.num_classes + 1):
        mask = probs[:, c] > cfg.score_floor
        if not mask.any():
            continue
        boxes = decode(proposals[mask], offsets[mask, 4 * (c - 1) : 4 * c], bounds=image_bounds)
        scores = probs[mask, c]
        ok = (boxes[:, 2] > boxes[:, 0]) & (boxes[:, 3] > boxes[:, 1])
        boxes, scores = boxes[ok], scores[ok]
        if not len(boxes):
            continue
        for i in nms(boxes, scores, cfg.class_nms_threshold):
            dets.append(Detection(Box(*map(float, boxes[i])), c, float(scores[i])))
    dets.sort(key=lambda d: -d.score)
    return dets[: cfg.max_detections]


def detect(hyper, proposals, params, cfg: DetectionHeadConfig, feature_stride, image_bounds) -> List[Detection]:
    """Class-specific scoring, regression and per-class NMS; background yields nothing."""
    proposals = np.asarray(proposals, dtype=np.float64).reshape(-1, 4)
    if not len(proposals):
        return []
    spec = detection_spec(cfg, hyper.shape[0])
    logits, offsets = head_infer(hyper, proposals, params, spec, feature_stride)
    return select_detections(proposals, logits, offsets, cfg, image_bounds)


def flop_estimate(spec: HeadSpec, num_candidates, feature_hw=None):
    """Multiply-accumulate counts for a head.

    Returns ``{'per_candidate', 'candidates_total', 'shared'}``: the per-region
    work (conv for ``basic``, FC-only for ``sp``), that times
    ``num_candidates``, and the one-off whole-map conv of ``sp`` (needs
    ``feature_hw``).
    """
    bh, bw = spec.bins
    k2 = spec.conv_kernel ** 2
    fc = 0
    width = spec.flat_width
    for w in spec.fc_widths:
        fc += width * w
        width = w
    fc += width * (spec.n_cls + spec.n_reg)
    conv = spec.conv_channels * spec.in_channels * k2
    if spec.variant == "sp":
        per = fc
        shared = conv * feature_hw[0] * feature_hw[1] if feature_hw else 0
    else:
        per = conv * bh * bw + fc
        shared = 0
    return {"per_candidate": per, "candidates_total": per * num_candidates, "shared": shared}
