"""Proposal recall curves, VOC-style AP/mAP, stage timing and Hyper Feature heatmaps."""
from __future__ import annotations

import json
import time
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from .data_io import encode_pgm
from .geometry import iou_matrix, score_order


def _ranked(boxes, scores):
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    if scores is None:
        return boxes
    return boxes[score_order(np.asarray(scores))]


def first_cover_rank(proposals, gt_boxes, iou_threshold):
    """Rank (0-based) of the first proposal covering each ground truth, ``inf`` if none.

    ``proposals`` is ``(boxes, scores)`` or pre-ranked boxes.
    """
    boxes = _ranked(*proposals) if isinstance(proposals, tuple) else _ranked(proposals, None)
    gt = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    ranks = np.full(len(gt), np.inf)
    if not len(gt) or not len(boxes):
        return ranks
    hit = iou_matrix(boxes, gt) >= iou_threshold
    any_hit = hit.any(axis=0)
    ranks[any_hit] = hit.argmax(axis=0)[any_hit]
    return ranks


def _all_ranks(proposals, ground_truth, iou_threshold):
    ranks = [first_cover_rank(p, g, iou_threshold) for p, g in zip(proposals, ground_truth)]
    ranks = np.concatenate(ranks) if ranks else np.zeros(0)
    if not len(ranks):
        raise ValueError("recall is undefined without ground-truth boxes")
    return ranks


def recall_at(proposals, ground_truth, iou_threshold, top_n):
    """Fraction of ground truths covered (IoU >= threshold) by some top-N proposal.

    One proposal may cover several ground truths (no one-to-one matching).
    ``proposals``: per image ``(boxes, scores)``; ``ground_truth``: per image boxes.
    """
    ranks = _all_ranks(proposals, ground_truth, iou_threshold)
    return float(np.mean(ranks < top_n))


def recall_vs_iou(proposals, ground_truth, thresholds, top_n):
    return [recall_at(proposals, ground_truth, t, top_n) for t in thresholds]


def recall_vs_n(proposals, ground_truth, iou_threshold, ns):
    ranks = _all_ranks(proposals, ground_truth, iou_threshold)
    return [float(np.mean(ranks < n)) for n in ns]


def proposals_needed(proposals, ground_truth, recall_target, iou_threshold):
    """Smallest N (>= 1) whose recall reaches ``recall_target``; ``None`` if never reached."""
    ranks = _all_ranks(proposals, ground_truth, iou_threshold)
    need = int(np.ceil(recall_target * len(ranks) - 1e-12))
    if need <= 0:
        return 1
    finite = np.sort(ranks[np.isfinite(ranks)])
    if len(finite) < need:
        return None
    return int(finite[need - 1]) + 1


def _voc_ap(rec, prec, use_11_point=False):
    if use_11_point:
        ap = 0.0
        for t in np.linspace(0, 1, 11):
            p = prec[rec >= t]
            ap += (p.max() if p.size else 0.0) / 11
        return float(ap)
    mrec = np.concatenate(([0.0], rec, [1.0]))
    mpre = np.concatenate(([0.0], prec, [0.0]))
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    i = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[i + 1] - mrec[i]) * mpre[i + 1]))


def _det_arrays(dets, class_id):
    """Accept a list of Detection objects or a dict with boxes/scores/classes."""
    if isinstance(dets, dict):
        m = np.asarray(dets["classes"]) == class_id
        return np.asarray(dets["boxes"], np.float64).reshape(-1, 4)[m], np.asarray(dets["scores"], np.float64)[m]
    sel = [d for d in dets if d.class_id == class_id]
    boxes = np.asarray([tuple(d.box) for d in sel], np.float64).reshape(-1, 4)
    return boxes, np.asarray([d.score for d in sel], np.float64)


def pr_curve(detections, ground_truth, class_id, iou_threshold=0.5):
    """Precision/recall along the score-ranked detections of one class.

    ``detections``: per image, list of Detection (or dict of arrays).
    ``ground_truth``: per image ``(boxes, classes)``.
    Each detection greedily takes the highest-IoU *unmatched* ground truth of
    its class at IoU >= threshold; otherwise it is a false positive.
    """
    recs = []
    for img, dets in enumerate(detections):
        boxes, scores = _det_arrays(dets, class_id)
        for b, s in zip(boxes, scores):
            recs.append((s, img, b))
    gts = []
    npos = 0
    for boxes, classes in ground_truth:
        boxes = np.asarray(boxes, np.float64).reshape(-1, 4)
        g = boxes[np.asarray(classes) == class_id]
        gts.append(g)
        npos += len(g)
    if npos == 0:
        return None, None, 0
    order = score_order(np.asarray([r[0] for r in recs])) if recs else []
    used = [np.zeros(len(g), bool) for g in gts]
    tp = np.zeros(len(recs))
    for k, j in enumerate(order):
        _, img, b = recs[j]
        g = gts[img]
        if not len(g):
            continue
        ov = iou_matrix(b, g)[0]
        ov[used[img]] = -1
        m = int(ov.argmax())
        if ov[m] >= iou_threshold:
            used[img][m] = True
            tp[k] = 1
    ctp = np.cumsum(tp)
    cfp = np.cumsum(1 - tp)
    rec = ctp / npos
    prec = ctp / np.maximum(ctp + cfp, np.finfo(np.float64).eps)
    return rec, prec, npos


def average_precision(detections, ground_truth, class_id, iou_threshold=0.5, use_11_point=False):
    """VOC AP for one class (all-point interpolation by default); ``None`` if the class has no GT."""
    rec, prec, npos = pr_curve(detections, ground_truth, class_id, iou_threshold)
    if npos == 0:
        return None
    return _voc_ap(rec, prec, use_11_point)


def mean_average_precision(detections, ground_truth, num_classes, iou_threshold=0.5, use_11_point=False):
    """``(mAP, {class: AP})`` averaged over classes with at least one ground truth."""
    aps = {}
    for c in range(1, num_classes + 1):
        ap = average_precision(detections, ground_truth, c, iou_threshold, use_11_point)
        if ap is None:
            warnings.warn(f"class {c} has no ground truth; excluded from mAP")
            continue
        aps[c] = ap
    if not aps:
        raise ValueError("no class has ground truth")
    return float(np.mean(list(aps.values()))), aps


# -- timing --------------------------------------------------------------------

@dataclass
class TimingRecord:
    variant: str
    runs: int
    shared_conv_ms: float
    proposal_ms: float
    detection_ms: float
    total_ms: float
    num_candidates: int
    samples: Dict[str, List[float]] = field(default_factory=dict, repr=False)


def benchmark_stages(model, images, variant=None, runs=20, warmup=2):
    """Median wall-clock milliseconds per stage over ``runs`` timed passes."""
    if variant is not None and variant != model.config.variant:
        model = model.with_variant(variant)
    images = list(images)
    t = {"shared": [], "proposal": [], "detection": [], "total": []}
    ncand = len(model.candidates(images[0].shape[-2:]))
    for r in range(warmup + runs):
        img = images[r % len(images)]
        t0 = time.perf_counter()
        hyper = model.hyper(img)
        t1 = time.perf_counter()
        boxes, _ = model.propose(hyper=hyper, image_hw=img.shape[-2:])
        t2 = time.perf_counter()
        model.detect(hyper=hyper, proposals=boxes, image_hw=img.shape[-2:])
        t3 = time.perf_counter()
        if r >= warmup:
            t["shared"].append((t1 - t0) * 1e3)
            t["proposal"].append((t2 - t1) * 1e3)
            t["detection"].append((t3 - t2) * 1e3)
            t["total"].append((t3 - t0) * 1e3)
    med = {k: float(np.median(v)) for k, v in t.items()}
    return TimingRecord(model.config.variant, runs, med["shared"], med["proposal"], med["detection"],
                        med["total"], ncand, t)


def time_proposal_stage(model, hyper, image_hw, runs=20, warmup=2):
    """Median ms of the proposal stage alone on a fixed Hyper Feature."""
    samples = []
    for r in range(warmup + runs):
        t0 = time.perf_counter()
        model.propose(hyper=hyper, image_hw=image_hw)
        if r >= warmup:
            samples.append((time.perf_counter() - t0) * 1e3)
    return float(np.median(samples)), samples


# -- visualisation ---------------------------------------------------------------

def hyper_heatmap(hyper):
    """Per-pixel channel L2 norm, min-max scaled to uint8 (a constant map is all 0)."""
    norm = np.sqrt(np.sum(np.asarray(hyper, np.float64) ** 2, axis=0))
    lo, hi = norm.min(), norm.max()
    if hi <= lo:
        return np.zeros(norm.shape, np.uint8)
    return np.round((norm - lo) / (hi - lo) * 255).astype(np.uint8)


def export_hyper_heatmap(hyper, path):
    gray = hyper_heatmap(hyper)
    Path(path).write_bytes(encode_pgm(gray))
    return gray


# -- report ------------------------------------------------------------------------

@dataclass
class EvalReport:
    recall_vs_iou: Dict[str, List[float]] = field(default_factory=dict)
    recall_vs_n: Dict[str, List[float]] = field(default_factory=dict)
    proposals_needed: Dict[str, Optional[int]] = field(default_factory=dict)
    ap_per_class: Dict[int, float] = field(default_factory=dict)
    map: Optional[float] = None
    timing: List[dict] = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def to_json(self):
        return json.dumps(asdict(self), indent=1, sort_keys=True, default=str)
