"""Acceptance criteria 1-8.

Each test records exactly one ``PASS [n]`` / ``FAIL [n]`` line (printed, and repeated in the
"acceptance criteria" section of the terminal summary).  Criteria 5 and 6 train real models
on the synthetic shapes task and take most of the runtime.
"""
import itertools
import time

import numpy as np
import pytest

from hypernet import numerics as nm
from hypernet.backbone import (backbone_forward, hyper_feature, hyper_feature_backward, init_backbone_params,
                               init_fusion_params)
from hypernet.config import BackboneConfig, LRNConfig, ablation_select, desk_config, full_scale_config
from hypernet.data_io import generate_shapes_dataset, load_checkpoint, save_checkpoint, split_dataset
from hypernet.evaluation import mean_average_precision, recall_at, time_proposal_stage
from hypernet.geometry import decode, encode, nms
from hypernet.heads import HeadSpec, flop_estimate, head_backward, head_forward, init_head_params
from hypernet.model import HyperNetModel
from hypernet.roi_ops import roi_pool_backward, roi_pool_forward
from hypernet.training import TrainPlan, multitask_loss, run_joint_training, train_proposal_only

from conftest import numeric_grad, rel_error, spaced
from test_evaluation import ap_instance, ap_oracle, library_ap
from test_geometry import nms_oracle, random_boxes
from test_roi_ops import scan_pool

SHAPES_PER_OP = 20
GRAD_TOL = 1e-5


# -- 1: gradient suite ------------------------------------------------------------

def _check_all(f, pairs, eps):
    """Worst relative error over ``(analytic, array)`` pairs against central differences."""
    return max(rel_error(g, numeric_grad(f, x, eps)) for g, x in pairs)


def _case_conv(rng):
    k = int(rng.choice([1, 2, 3, 5]))
    s, p = int(rng.integers(1, 4)), int(rng.integers(0, k))
    x = rng.normal(size=(int(rng.integers(1, 4)), int(rng.integers(k, k + 6)), int(rng.integers(k, k + 6))))
    c_out = int(rng.integers(1, 4))
    lp = nm.LayerParams(weight=rng.normal(size=(c_out, x.shape[0], k, k)), bias=rng.normal(size=c_out))
    r = rng.normal(size=nm.conv2d_forward(x, lp, s, p).shape)
    gx = nm.conv2d_backward(x, lp, r, s, p)
    f = lambda: np.sum(nm.conv2d_forward(x, lp, s, p) * r)
    return _check_all(f, [(gx, x), (lp.grads["weight"], lp["weight"]), (lp.grads["bias"], lp["bias"])], 1e-4)


def _case_deconv(rng):
    k = int(rng.choice([1, 2, 3, 4]))
    s, p = int(rng.integers(1, 4)), int(rng.integers(0, (k - 1) // 2 + 1))
    x = rng.normal(size=(int(rng.integers(1, 4)), int(rng.integers(1, 5)), int(rng.integers(1, 5))))
    c_out = int(rng.integers(1, 4))
    lp = nm.LayerParams(weight=rng.normal(size=(x.shape[0], c_out, k, k)), bias=rng.normal(size=c_out))
    r = rng.normal(size=nm.deconv2d_forward(x, lp, s, p).shape)
    gx = nm.deconv2d_backward(x, lp, r, s, p)
    f = lambda: np.sum(nm.deconv2d_forward(x, lp, s, p) * r)
    return _check_all(f, [(gx, x), (lp.grads["weight"], lp["weight"]), (lp.grads["bias"], lp["bias"])], 1e-4)


def _case_pool(rng):
    window = int(rng.integers(1, 4))
    stride, pad = int(rng.integers(1, 4)), int(rng.integers(0, window // 2 + 1))
    h, w = (int(v) for v in rng.integers(window, window + 6, 2))
    x = spaced(rng, (int(rng.integers(1, 4)), h, w))
    out, arg = nm.maxpool2d_forward(x, window, stride, pad)
    r = rng.normal(size=out.shape)
    f = lambda: np.sum(nm.maxpool2d_forward(x, window, stride, pad)[0] * r)
    return _check_all(f, [(nm.maxpool2d_backward(r, arg, x.shape), x)], 1e-4)


def _case_lrn(rng):
    kw = dict(depth=int(rng.integers(1, 6)), alpha=float(rng.uniform(1e-4, 1)), beta=float(rng.uniform(0.5, 1)),
              k=float(rng.uniform(1, 2)))
    x = rng.normal(size=(int(rng.integers(1, 9)), int(rng.integers(1, 4)), int(rng.integers(1, 4)))) * 2
    r = rng.normal(size=x.shape)
    f = lambda: np.sum(nm.lrn_forward(x, **kw) * r)
    return _check_all(f, [(nm.lrn_backward(x, r, **kw), x)], 1e-4)


def _case_fc(rng):
    n, d, o = (int(v) for v in rng.integers(1, 9, 3))
    x = rng.normal(size=(n, d))
    lp = nm.LayerParams(weight=rng.normal(size=(o, d)), bias=rng.normal(size=o))
    r = rng.normal(size=(n, o))
    gx = nm.fc_backward(x, lp, r)
    f = lambda: np.sum(nm.fc_forward(x, lp) * r)
    return _check_all(f, [(gx, x), (lp.grads["weight"], lp["weight"]), (lp.grads["bias"], lp["bias"])], 1e-4)


def _case_roi(rng):
    stride = float(rng.choice([1, 2, 4]))
    c, h, w = int(rng.integers(1, 4)), int(rng.integers(2, 10)), int(rng.integers(2, 10))
    feat = spaced(rng, (c, h, w))
    n = int(rng.integers(1, 5))
    x0 = rng.uniform(0, (w - 1) * stride, n)
    y0 = rng.uniform(0, (h - 1) * stride, n)
    boxes = np.stack([x0, y0, rng.uniform(x0 + 0.5, w * stride), rng.uniform(y0 + 0.5, h * stride)], axis=1)
    bins = tuple(int(v) for v in rng.integers(1, 5, 2))
    out, arg = roi_pool_forward(feat, boxes, stride, bins)
    r = rng.normal(size=out.shape)
    f = lambda: np.sum(roi_pool_forward(feat, boxes, stride, bins)[0] * r)
    return _check_all(f, [(roi_pool_backward(r, arg, feat.shape), feat)], 1e-4)


def _case_fusion(rng):
    taps = tuple(sorted(rng.choice([1, 2, 3, 4, 5], int(rng.integers(1, 4)), replace=False).tolist()))
    backbone = BackboneConfig(channels=(2, 3, 3, 2, 2), strides=(2, 2, 1, 2, 1), taps=taps)
    fusion = ablation_select(taps, backbone, width=int(rng.integers(1, 4)),
                             lrn=LRNConfig(depth=3, alpha=0.5, beta=0.75, k=1.0))
    side = int(rng.choice([32, 40, 48]))
    init = lambda s: nm.xavier_init(s, rng)
    # the backbone only supplies tap shapes; the fused taps are fresh random inputs
    features, _ = backbone_forward(rng.normal(size=(3, side, side)), init_backbone_params(backbone, init, np.float64),
                                   backbone)
    params = init_fusion_params(fusion, init, np.float64)
    for lp in params.values():
        if "bias" in lp.params:
            lp["bias"] = rng.normal(size=lp["bias"].shape) * 0.1
    features = [rng.normal(size=t.shape) for t in features]
    out, cache = hyper_feature(features, params, fusion)
    r = rng.normal(size=out.shape)
    g_taps = hyper_feature_backward(cache, r, params, fusion)
    f = lambda: np.sum(hyper_feature(features, params, fusion)[0] * r)
    pairs = list(zip(g_taps, features))
    pairs += [(lp.grads[k], arr) for lp in params.values() for k, arr in lp.params.items()]
    # 1e-6 keeps the step from crossing a ReLU kink after the compression convs
    return _check_all(f, pairs, 1e-6)


def _case_head(rng, variant):
    c = int(rng.integers(1, 4))
    bins = tuple(int(v) for v in rng.integers(1, 4, 2))
    fc = tuple(int(v) for v in rng.integers(2, 6, int(rng.integers(1, 3))))
    n_cls = int(rng.integers(2, 5))
    spec = HeadSpec("head", variant, c, int(rng.integers(1, 4)), 3, bins, fc, float(rng.choice([0.0, 0.25])),
                    n_cls, 4 * (n_cls - 1))
    params = init_head_params(spec, lambda s: nm.xavier_init(s, rng), np.float64)
    for lp in params.values():
        lp["bias"] = rng.normal(size=lp["bias"].shape) * 0.1
    hw = int(rng.integers(4, 9))
    hyper = spaced(rng, (c, hw, hw), gap=0.01)
    n = int(rng.integers(1, 4))
    xy = rng.uniform(0, hw * 4 - 6, size=(n, 2))
    boxes = np.concatenate([xy, np.minimum(xy + rng.uniform(3, hw * 4, size=(n, 2)), hw * 4)], axis=1)
    seed = int(rng.integers(1 << 30))
    cls, reg, cache = head_forward(hyper, boxes, params, spec, 4, training=True, rng=seed)
    r1, r2 = rng.normal(size=cls.shape), rng.normal(size=reg.shape)

    def f():
        a, b, _ = head_forward(hyper, boxes, params, spec, 4, training=True, rng=seed)
        return np.sum(a * r1) + np.sum(b * r2)

    gh = head_backward(cache, r1, r2, params, spec)
    pairs = [(gh, hyper)] + [(lp.grads[k], arr) for lp in params.values() for k, arr in lp.params.items()]
    return _check_all(f, pairs, 1e-6)


def _case_loss(rng, lam):
    n, k = int(rng.integers(1, 12)), int(rng.integers(2, 6))
    scores = rng.normal(size=(n, k)) * 2
    labels = rng.integers(0, k, n)
    pred, target = rng.normal(size=(n, 4)) * 2, rng.normal(size=(n, 4))
    _, _, (gs, gd) = multitask_loss(scores, labels, pred, target, lam)
    f = lambda: multitask_loss(scores, labels, pred, target, lam)[0]
    return _check_all(f, [(gs, scores), (gd, pred)], 1e-5)


GRAD_OPS = {
    "conv": _case_conv,
    "deconv": _case_deconv,
    "pool": _case_pool,
    "lrn": _case_lrn,
    "fc": _case_fc,
    "roi_pool": _case_roi,
    "fusion": _case_fusion,
    "head_basic": lambda rng: _case_head(rng, "basic"),
    "head_sp": lambda rng: _case_head(rng, "sp"),
    "loss_lam1": lambda rng: _case_loss(rng, 1.0),
    "loss_lam3": lambda rng: _case_loss(rng, 3.0),
}


@pytest.mark.criterion(1, "gradient suite")
def test_criterion_1_gradient_suite(verdict):
    t0 = time.perf_counter()
    worst = {}
    for k, (name, case) in enumerate(GRAD_OPS.items()):
        rng = np.random.default_rng(1000 + k)
        worst[name] = max(case(rng) for _ in range(SHAPES_PER_OP))
    elapsed = time.perf_counter() - t0
    bad = {n: e for n, e in worst.items() if not e < GRAD_TOL}
    verdict(not bad and elapsed < 300,
            f"{len(GRAD_OPS)} ops x {SHAPES_PER_OP} shapes, worst rel err {max(worst.values()):.1e} "
            f"({max(worst, key=worst.get)}), {elapsed:.0f} s" + (f"; over tolerance: {bad}" if bad else ""))


# -- 2: oracle equivalence --------------------------------------------------------

@pytest.mark.criterion(2, "oracle equivalence")
def test_criterion_2_oracles(verdict):
    rng = np.random.default_rng(2)
    nms_cases = 0
    nms_ok = True
    for n in [0, 1, 2, 5, 50, 300, 1000, 2000] + [int(v) for v in rng.integers(0, 2001, 8)]:
        boxes = random_boxes(rng, n, extent=400)
        scores = np.round(rng.random(n), 2)  # coarse scores force index tie-breaks
        thr = float(rng.choice([0.3, 0.5, 0.7, 0.9]))
        nms_ok &= list(nms(boxes, scores, thr)) == nms_oracle(boxes.tolist(), scores.tolist(), thr)
        nms_cases += 1

    roi_ok = True
    for k in range(1000):
        c = int(rng.integers(1, 4))
        h, w = (int(v) for v in rng.integers(1, 16, 2))
        stride = float(rng.choice([1, 2, 4, 8]))
        bins = tuple(int(v) for v in rng.integers(1, 6, 2))
        f = rng.integers(-3, 4, size=(c, h, w)).astype(np.float64) if k % 2 else rng.normal(size=(c, h, w))
        x0, y0 = rng.uniform(-4, w * stride - 1), rng.uniform(-4, h * stride - 1)
        box = np.array([x0, y0, max(x0 + rng.uniform(0.5, w * stride), 0.5),
                        max(y0 + rng.uniform(0.5, h * stride), 0.5)])
        out, arg = roi_pool_forward(f, box[None], stride, bins)
        ref, ref_arg = scan_pool(f, box, stride, bins)
        roi_ok &= out[0].tobytes() == ref.tobytes() and np.array_equal(arg[0], ref_arg)

    ap_worst, ap_cases = 0.0, 0
    for n_det in range(1, 11):
        for n_gt in range(1, 6):
            for _ in range(6):
                dets, gts = ap_instance(rng, n_det, n_gt)
                if not sum(len(g) for g in gts):
                    continue
                # every score ordering for small instances, random orderings beyond
                orders = (itertools.permutations(range(n_det)) if n_det <= 5
                          else (rng.permutation(n_det) for _ in range(20)))
                for perm in orders:
                    scores = np.asarray(perm, dtype=np.float64) / n_det + 0.01
                    ref = ap_oracle([(img, b, s) for (img, b), s in zip(dets, scores)], gts)
                    ap_worst = max(ap_worst, abs(library_ap(dets, scores, gts, 2) - ref))
                    ap_cases += 1
    verdict(nms_ok and roi_ok and ap_worst <= 1e-9,
            f"NMS {nms_cases} cases n<=2000 {'exact' if nms_ok else 'MISMATCH'}; ROI pool 1000 instances "
            f"{'bit-exact' if roi_ok else 'MISMATCH'}; AP {ap_cases} cases max |diff| {ap_worst:.1e}")


# -- 3: regression round trip -----------------------------------------------------

@pytest.mark.criterion(3, "box regression round trip")
def test_criterion_3_round_trip(verdict):
    rng = np.random.default_rng(3)
    p = random_boxes(rng, 100_000, extent=1000, min_size=4, max_size=200)
    g = random_boxes(rng, 100_000, extent=1000, min_size=4, max_size=200)
    keep = np.all(np.abs(encode(p, g)[:, 2:]) < 4, axis=1)  # inside the decode clamp
    err = np.abs(decode(p, encode(p, g)) - g).max()
    verdict(err <= 1e-9 and keep.all(), f"1e5 pairs, max |decode(encode(P,G),P) - G| = {err:.1e}")


# -- 4: shape contract ------------------------------------------------------------

@pytest.mark.criterion(4, "Hyper Feature shape contract")
def test_criterion_4_shapes(verdict):
    model = HyperNetModel.initialize(desk_config(), seed=0)
    rng = np.random.default_rng(4)
    sizes = [(32, 32), (32, 48), (64, 64), (128, 128), (96, 160), (200, 120)]
    desk_ok = all(model.hyper(rng.random((3, h, w)).astype(np.float32)).shape == (126, h // 4, w // 4)
                  for h, w in sizes)
    t0 = time.perf_counter()
    big = HyperNetModel.initialize(full_scale_config(), seed=0)
    shape = big.hyper(np.zeros((3, 600, 1000), np.float32)).shape
    elapsed = time.perf_counter() - t0
    verdict(desk_ok and shape == (126, 150, 250) and elapsed < 30,
            f"desk sizes {sizes} -> stride 4 x 126 ch {'ok' if desk_ok else 'WRONG'}; "
            f"600x1000 full-scale -> {shape} in {elapsed:.1f} s")


# -- 5: desk-scale training -------------------------------------------------------

def shapes_split():
    data = generate_shapes_dataset(600, image_size=128, num_classes=3, seed=2024)
    return split_dataset(data, 100)


@pytest.fixture(scope="module")
def trained():
    train, test = shapes_split()
    t0 = time.perf_counter()
    result = run_joint_training(train, TrainPlan(seed=0), desk_config(variant="sp"))
    return result, time.perf_counter() - t0, test


@pytest.mark.criterion(5, "desk-scale training")
def test_criterion_5_training(trained, verdict):
    result, elapsed, test = trained
    model = result.model
    props, dets = [], []
    for s in test:
        h = model.hyper(s.image)
        boxes, scores = model.propose(hyper=h, image_hw=s.image.shape[-2:])
        props.append((boxes, scores))
        dets.append(model.detect(hyper=h, proposals=boxes, image_hw=s.image.shape[-2:]))
    recall = recall_at(props, [s.boxes for s in test], 0.5, 50)
    m, _ = mean_average_precision(dets, [(s.boxes, s.classes) for s in test], 3, 0.5)
    verdict(elapsed < 3600 and recall >= 0.9 and m >= 0.5,
            f"500 train / 100 held-out, schedule {TrainPlan().iterations}, {elapsed / 60:.1f} min; "
            f"recall@50 (IoU 0.5) {recall:.3f} (floor 0.9); mAP@0.5 {m:.3f} (floor 0.5)")


def test_stage2_loss_at_least_halves(trained):
    losses = trained[0].losses["step2_proposal"]
    first, last = np.mean(losses[:50]), np.mean(losses[-50:])
    assert last <= 0.5 * first, (first, last)


# -- 6: tap ablation --------------------------------------------------------------

ABLATION_N = 100
ABLATION_IOU = 0.5


@pytest.mark.criterion(6, "tap ablation")
def test_criterion_6_ablation(verdict):
    train, test = shapes_split()
    plan = TrainPlan(seed=0)
    gts = [s.boxes for s in test]
    recall, at10 = {}, {}
    for taps in [(1, 3, 5), (1,), (3,), (5,)]:
        res = train_proposal_only(train, plan, desk_config(variant="sp").with_taps(taps))
        props = [res.model.propose(s.image) for s in test]
        recall[taps] = recall_at(props, gts, ABLATION_IOU, ABLATION_N)
        at10[taps] = recall_at(props, gts, ABLATION_IOU, 10)
    fused = recall[(1, 3, 5)]
    name = lambda t: "+".join(map(str, t))
    # recall@10 is reported only; it separates the configurations where N=100 saturates
    verdict(all(fused >= r for r in recall.values()),
            f"recall@{ABLATION_N} (IoU {ABLATION_IOU}), {plan.iterations[0]} iterations each: "
            + ", ".join(f"{name(t)}={r:.3f}" for t, r in recall.items())
            + "; recall@10 for reference: " + ", ".join(f"{name(t)}={r:.3f}" for t, r in at10.items()))


# -- 7: SP speedup ----------------------------------------------------------------

@pytest.mark.criterion(7, "SP proposal speedup")
def test_criterion_7_speedup(verdict):
    basic = HyperNetModel.initialize(desk_config(variant="basic"), seed=0)
    sp = basic.with_variant("sp")
    image = generate_shapes_dataset(1, seed=9)[0].image
    hyper = basic.hyper(image)
    n = len(basic.candidates(image.shape[-2:]))
    assert n == len(sp.candidates(image.shape[-2:]))
    t_basic, _ = time_proposal_stage(basic, hyper, image.shape[-2:], runs=5, warmup=1)
    t_sp, _ = time_proposal_stage(sp, hyper, image.shape[-2:], runs=15, warmup=2)
    hw = hyper.shape[-2:]
    mac = {m.config.variant: flop_estimate(m.proposal_spec, n, hw)["per_candidate"] for m in (basic, sp)}
    measured, predicted = t_basic / t_sp, mac["basic"] / mac["sp"]
    verdict(measured >= 5 and predicted > 5,
            f"{n} candidates: basic {t_basic:.0f} ms, sp {t_sp:.0f} ms, measured x{measured:.1f} (floor 5); "
            f"per-candidate MACs {mac['basic']:,} vs {mac['sp']:,}, predicted x{predicted:.1f}")


def test_benchmark_medians_stable():
    model = HyperNetModel.initialize(desk_config(variant="sp"), seed=0)
    image = generate_shapes_dataset(1, seed=9)[0].image
    hyper = model.hyper(image)
    a, b = (time_proposal_stage(model, hyper, image.shape[-2:], runs=15, warmup=2)[0] for _ in range(2))
    assert abs(a - b) / min(a, b) < 0.2, (a, b)


# -- 8: determinism ---------------------------------------------------------------

@pytest.mark.criterion(8, "end-to-end determinism")
def test_criterion_8_determinism(tmp_path, verdict):
    data = generate_shapes_dataset(60, seed=8)
    train, test = split_dataset(data, 5)
    plan = TrainPlan(iterations=(60, 20, 30, 20), seed=5)
    outputs, blobs = [], []
    for run in range(2):
        res = run_joint_training(train, plan, desk_config(variant="sp"))
        path = tmp_path / f"run{run}.ckpt"
        save_checkpoint(path, res.model, "step6_unified")
        blobs.append(path.read_bytes())
        model = load_checkpoint(path)
        out = []
        for s in test:
            boxes, scores = model.propose(s.image)
            out.append(boxes.tobytes() + scores.tobytes())
            out.append(repr(model.detect(s.image, proposals=boxes)).encode())
        outputs.append(out)
    same_ckpt = blobs[0] == blobs[1]
    same_out = outputs[0] == outputs[1]
    verdict(same_ckpt and same_out,
            f"two seeded runs: checkpoints {'identical' if same_ckpt else 'DIFFER'} ({len(blobs[0]):,} bytes); "
            f"proposals/detections on {len(test)} images {'bit-identical' if same_out else 'DIFFER'}")
