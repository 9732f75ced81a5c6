"""Label assignment, minibatch sampling, multi-task loss, SGD and the staged
joint-training schedule.

Schedule (one image per iteration, 64 sampled RoIs):

1. seeded Xavier init (stands in for a pre-trained backbone)
2. train the proposal network
3. train the detection network on proposals from step 2 (own copy of the
   Hyper Feature layers, initialised from step 1)
4. fine-tune the proposal network starting from the Hyper Feature layers of step 3
5. fine-tune the detection head on proposals from step 4, Hyper Feature layers frozen
6. merge: shared Hyper Feature layers + both heads
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Optional

import numpy as np

from . import numerics as nm
from .config import HyperNetConfig
from .geometry import encode, iou_matrix
from .heads import head_backward, head_forward
from .model import HYPER_PREFIXES, HyperNetModel

log = logging.getLogger(__name__)

xavier_init = nm.xavier_init

POSITIVE_IOU = 0.45
NEGATIVE_IOU = 0.3


@dataclass
class LabelAssignment:
    """``labels``: class id (>0) for positives, 0 negative, -1 ignored."""

    labels: np.ndarray
    matched: np.ndarray
    targets: np.ndarray
    max_iou: np.ndarray

    @property
    def positives(self):
        return np.flatnonzero(self.labels > 0)

    @property
    def negatives(self):
        return np.flatnonzero(self.labels == 0)


def assign_labels(candidates, gt_boxes, gt_classes=None, positive_iou=POSITIVE_IOU,
                  negative_iou=NEGATIVE_IOU, force_match=True):
    """Positive when IoU with some ground truth exceeds ``positive_iou``,
    negative when below ``negative_iou`` against all, ignored otherwise.

    With ``force_match`` each ground truth also claims its best candidate.
    Positives carry the class of their max-IoU ground truth (1 when
    ``gt_classes`` is omitted) and encoded regression targets.
    """
    cand = np.asarray(candidates, dtype=np.float64).reshape(-1, 4)
    gt = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    n = len(cand)
    targets = np.zeros((n, 4))
    if not len(gt):
        return LabelAssignment(np.zeros(n, np.int64), np.full(n, -1), targets, np.zeros(n))
    classes = np.ones(len(gt), np.int64) if gt_classes is None else np.asarray(gt_classes, np.int64)
    ov = iou_matrix(cand, gt)
    matched = ov.argmax(axis=1)  # argmax keeps the lowest index on ties
    best = ov[np.arange(n), matched]
    labels = np.full(n, -1, np.int64)
    labels[best < negative_iou] = 0
    pos = best > positive_iou
    labels[pos] = classes[matched[pos]]
    if force_match:
        for g in range(len(gt)):
            i = int(ov[:, g].argmax())
            if ov[i, g] > 0 and labels[i] <= 0:
                labels[i] = classes[g]
                matched[i] = g
    pos = labels > 0
    if pos.any():
        targets[pos] = encode(cand[pos], gt[matched[pos]])
    matched = np.where(pos, matched, -1)
    return LabelAssignment(labels, matched, targets, best)


def sample_minibatch(assignment: LabelAssignment, size=64, positive_fraction=0.25, rng=None):
    """Up to ``size * positive_fraction`` positives, negatives fill the rest."""
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    pos = assignment.positives
    neg = assignment.negatives
    n_pos = min(len(pos), int(round(size * positive_fraction)))
    n_neg = min(len(neg), size - n_pos)
    take_pos = rng.choice(pos, n_pos, replace=False) if n_pos else pos[:0]
    take_neg = rng.choice(neg, n_neg, replace=False) if n_neg else neg[:0]
    return np.concatenate([take_pos, take_neg]).astype(np.int64)


def smooth_l1(x):
    ax = np.abs(x)
    return np.where(ax < 1, 0.5 * x * x, ax - 0.5)


def smooth_l1_grad(x):
    return np.where(np.abs(x) < 1, x, np.sign(x))


def multitask_loss(scores, labels, deltas_pred, deltas_target, lam):
    """``L_cls + lam * L_reg``.

    L_cls is the mean softmax loss over all rows; L_reg is the mean over
    positive rows (label > 0) of the summed smooth-L1 residual.  Returns
    ``(total, parts, (grad_scores, grad_deltas))`` with ``parts`` a dict of
    ``cls``/``reg``.
    """
    labels = np.asarray(labels)
    l_cls, g_cls = nm.softmax_cross_entropy(scores, labels)
    pos = labels > 0
    g_reg = np.zeros_like(deltas_pred)
    l_reg = 0.0
    n_pos = int(pos.sum())
    if n_pos:
        r = deltas_pred[pos] - deltas_target[pos]
        l_reg = float(smooth_l1(r).sum() / n_pos)
        g_reg[pos] = lam * smooth_l1_grad(r) / n_pos
    total = l_cls + lam * l_reg
    return total, {"cls": l_cls, "reg": l_reg}, (g_cls, g_reg.astype(deltas_pred.dtype, copy=False))


@dataclass
class OptimizerState:
    learning_rate: float = 0.005
    momentum: float = 0.9
    weight_decay: float = 0.0005
    velocity: Dict[str, Dict[str, np.ndarray]] = field(default_factory=dict)


def sgd_step(params, state: OptimizerState, names=None):
    """``v <- mu*v - lr*(g + wd*w); w <- w + v`` for each layer in ``names``."""
    names = params.keys() if names is None else names
    lr, mu, wd = state.learning_rate, state.momentum, state.weight_decay
    for name in names:
        lp = params[name]
        vel = state.velocity.setdefault(name, {k: np.zeros_like(v) for k, v in lp.params.items()})
        for k, w in lp.params.items():
            v = vel[k]
            v *= mu
            v -= (lr * (lp.grads[k] + wd * w)).astype(v.dtype, copy=False)
            w += v


@dataclass
class TrainPlan:
    """Iterations for steps 2-5 plus shared optimisation settings."""

    iterations: tuple = (2000, 2000, 1000, 1000)
    learning_rates: tuple = (0.005, 0.0005)
    decay_fraction: float = 2 / 3
    momentum: float = 0.9
    weight_decay: float = 0.0005
    rois_per_image: int = 64
    positive_fraction: float = 0.25
    proposal_lambda: float = 3.0
    detection_lambda: float = 1.0
    flip: bool = True
    seed: int = 0
    log_every: int = 50

    STAGES = ("step2_proposal", "step3_detection", "step4_proposal", "step5_detection")

    def stage_descriptors(self):
        return [
            {"stage": self.STAGES[0], "trains": ["hyper", "proposal"], "proposals_from": None},
            {"stage": self.STAGES[1], "trains": ["hyper", "detection"], "proposals_from": self.STAGES[0]},
            {"stage": self.STAGES[2], "trains": ["hyper", "proposal"], "proposals_from": None,
             "hyper_from": self.STAGES[1]},
            {"stage": self.STAGES[3], "trains": ["detection"], "frozen": ["hyper"],
             "proposals_from": self.STAGES[2]},
        ]

    def learning_rate(self, it, total):
        return self.learning_rates[0] if it < self.decay_fraction * total else self.learning_rates[1]

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "iterations" in d:
            d["iterations"] = tuple(d["iterations"])
        if "learning_rates" in d:
            d["learning_rates"] = tuple(d["learning_rates"])
        return cls(**d)


class TrainingDiverged(RuntimeError):
    def __init__(self, stage, iteration, value):
        super().__init__(f"non-finite loss {value} in {stage} at iteration {iteration}")
        self.stage = stage
        self.iteration = iteration


def flip_sample(image, boxes):
    w = image.shape[-1]
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    flipped = boxes.copy()
    flipped[:, 0] = w - boxes[:, 2]
    flipped[:, 2] = w - boxes[:, 0]
    return image[..., ::-1].copy(), flipped


def _gt(sample):
    boxes = np.asarray([tuple(b) for b, _ in sample.annotations], dtype=np.float64).reshape(-1, 4)
    classes = np.asarray([c for _, c in sample.annotations], dtype=np.int64)
    return boxes, classes


def proposal_step(model: HyperNetModel, image, gt_boxes, plan: TrainPlan, rng, train_hyper=True):
    """One proposal-network minibatch: forward, multi-task loss (lambda=3), backward."""
    hyper, hcache = model.hyper_forward(image)
    cand = model.candidates(image.shape[-2:])
    assign = assign_labels(cand, gt_boxes)
    idx = sample_minibatch(assign, plan.rois_per_image, plan.positive_fraction, rng)
    spec = model.proposal_spec
    labels = (assign.labels[idx] > 0).astype(np.int64)
    cls, reg, cache = head_forward(hyper, cand[idx], model.params, spec, model.feature_stride, True, rng)
    total, parts, (g_cls, g_reg) = multitask_loss(
        cls, labels, reg, assign.targets[idx].astype(reg.dtype), plan.proposal_lambda)
    g_hyper = head_backward(cache, g_cls.astype(cls.dtype), g_reg, model.params, spec)
    if train_hyper:
        model.hyper_backward(hcache, g_hyper)
    return total, parts


def detection_step(model: HyperNetModel, image, gt_boxes, gt_classes, proposals, plan: TrainPlan, rng,
                   train_hyper=True):
    """One detection-network minibatch over proposals plus ground-truth boxes."""
    hyper, hcache = model.hyper_forward(image)
    rois = np.concatenate([np.asarray(proposals, dtype=np.float64).reshape(-1, 4), gt_boxes], axis=0)
    assign = assign_labels(rois, gt_boxes, gt_classes, force_match=False)
    idx = sample_minibatch(assign, plan.rois_per_image, plan.positive_fraction, rng)
    spec = model.detection_spec
    labels = assign.labels[idx]
    cls, reg, cache = head_forward(hyper, rois[idx], model.params, spec, model.feature_stride, True, rng)
    # class-specific offsets: columns 4(k-1)..4k for positives of class k
    cols = 4 * (np.maximum(labels, 1) - 1)[:, None] + np.arange(4)[None, :]
    rows = np.arange(len(idx))[:, None]
    picked = reg[rows, cols]
    total, parts, (g_cls, g_pick) = multitask_loss(
        cls, labels, picked, assign.targets[idx].astype(reg.dtype), plan.detection_lambda)
    g_reg = np.zeros_like(reg)
    g_reg[rows, cols] = g_pick
    g_hyper = head_backward(cache, g_cls.astype(cls.dtype), g_reg, model.params, spec)
    if train_hyper:
        model.hyper_backward(hcache, g_hyper)
    return total, parts


def _trainable(model, heads, train_hyper):
    prefixes = [h + "." for h in heads] + (list(HYPER_PREFIXES) if train_hyper else [])
    return model.layer_names(prefixes)


def compute_proposals(model: HyperNetModel, dataset, top_k=None, mode="train"):
    """Proposal boxes per sample (unflipped images)."""
    out = []
    for s in dataset:
        boxes, _ = model.propose(s.image, mode=mode, top_k=top_k)
        out.append(boxes)
    return out


def run_stage(model: HyperNetModel, dataset, plan: TrainPlan, stage, iterations, rng, kind,
              proposals=None, train_hyper=True, records=None, sink=None):
    """Train one step of the schedule in place; returns the per-iteration total losses."""
    names = _trainable(model, [kind], train_hyper)
    state = OptimizerState(plan.learning_rates[0], plan.momentum, plan.weight_decay)
    losses = []
    order = np.array([], dtype=np.int64)
    gts = [_gt(s) for s in dataset]
    for it in range(iterations):
        if not order.size:
            order = rng.permutation(len(dataset))
        i, order = int(order[0]), order[1:]
        image = dataset[i].image
        boxes, classes = gts[i]
        props = proposals[i] if proposals is not None else None
        if plan.flip and rng.random() < 0.5:
            image, boxes = flip_sample(image, boxes)
            if props is not None and len(props):
                _, props = flip_sample(dataset[i].image, props)
        state.learning_rate = plan.learning_rate(it, iterations)
        model.zero_grad()
        if kind == "proposal":
            total, parts = proposal_step(model, image, boxes, plan, rng, train_hyper)
        else:
            total, parts = detection_step(model, image, boxes, classes, props, plan, rng, train_hyper)
        if not math.isfinite(total):
            raise TrainingDiverged(stage, it, total)
        sgd_step(model.params, state, names)
        losses.append(total)
        if records is not None and (it % plan.log_every == 0 or it == iterations - 1):
            rec = {"stage": stage, "iteration": it, "L_cls": parts["cls"], "L_reg": parts["reg"],
                   "total": total, "lr": state.learning_rate}
            records.append(rec)
            if sink is not None:
                sink.write(json.dumps(rec) + "\n")
                sink.flush()
            log.debug("%s it %d loss %.4f", stage, it, total)
    return losses


@dataclass
class TrainResult:
    model: HyperNetModel
    records: List[dict]
    losses: Dict[str, List[float]]
    stage_models: Dict[str, HyperNetModel] = field(default_factory=dict)


def run_joint_training(dataset, plan: TrainPlan, config: HyperNetConfig, sink=None,
                       on_stage: Optional[Callable[[str, HyperNetModel], None]] = None,
                       dtype=np.float32) -> TrainResult:
    """Run the six-step schedule and return the unified model plus metric log."""
    if not len(dataset):
        raise ValueError("empty dataset")
    rng = np.random.default_rng(plan.seed)
    init = HyperNetModel.initialize(config, seed=plan.seed, dtype=dtype)  # step 1
    if on_stage:
        on_stage("step1_init", init)
    records, losses = [], {}
    it2, it3, it4, it5 = plan.iterations
    s2, s3, s4, s5 = plan.STAGES

    prop_net = init.copy()
    losses[s2] = run_stage(prop_net, dataset, plan, s2, it2, rng, "proposal", records=records, sink=sink)
    if on_stage:
        on_stage(s2, prop_net)

    det_net = init.copy()
    if it3:
        props = compute_proposals(prop_net, dataset)
        losses[s3] = run_stage(det_net, dataset, plan, s3, it3, rng, "detection", props,
                               records=records, sink=sink)
    else:
        losses[s3] = []
    if on_stage:
        on_stage(s3, det_net)

    prop_net.assign_layers(det_net, HYPER_PREFIXES)
    losses[s4] = run_stage(prop_net, dataset, plan, s4, it4, rng, "proposal", records=records, sink=sink)
    if on_stage:
        on_stage(s4, prop_net)

    det_net.assign_layers(prop_net, HYPER_PREFIXES)
    if it5:
        props = compute_proposals(prop_net, dataset)
        losses[s5] = run_stage(det_net, dataset, plan, s5, it5, rng, "detection", props, train_hyper=False,
                               records=records, sink=sink)
    else:
        losses[s5] = []
    if on_stage:
        on_stage(s5, det_net)

    unified = prop_net.copy()  # step 6
    unified.assign_layers(det_net, ["detection."])
    if on_stage:
        on_stage("step6_unified", unified)
    return TrainResult(unified, records, losses)


def train_proposal_only(dataset, plan: TrainPlan, config: HyperNetConfig, dtype=np.float32):
    """Step 2 alone (used for layer-combination ablations)."""
    rng = np.random.default_rng(plan.seed)
    model = HyperNetModel.initialize(config, seed=plan.seed, dtype=dtype)
    records = []
    losses = run_stage(model, dataset, plan, TrainPlan.STAGES[0], plan.iterations[0], rng, "proposal",
                       records=records)
    return TrainResult(model, records, {TrainPlan.STAGES[0]: losses})
