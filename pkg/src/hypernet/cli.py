"""Command-line entry point: ``hypernet <command> [flags]``.

Every command resolves a :class:`RunConfig` (defaults, then an optional
``--config`` JSON file, then explicit flags) and writes it as
``run_config.json`` next to its outputs.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional

import numpy as np

from .config import desk_config
from .data_io import (DataFormatError, annotation_dict, generate_shapes_dataset, list_sample_ids,
                      load_checkpoint, parse_objects, read_dataset, read_sample, save_checkpoint,
                      write_dataset)
from .evaluation import (EvalReport, benchmark_stages, export_hyper_heatmap, mean_average_precision,
                         proposals_needed, recall_vs_iou, recall_vs_n)
from .model import HyperNetModel
from .training import TrainPlan, TrainingDiverged, run_joint_training

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("hypernet")


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    command: str = ""
    data: Optional[str] = None
    model: Optional[str] = None
    proposals: Optional[str] = None
    detections: Optional[str] = None
    out: Optional[str] = None
    plan: Optional[str] = None
    variant: Optional[str] = None
    seed: int = 0
    count: int = 100
    size: int = 128
    classes: int = 3
    top_k: Optional[int] = None
    iou_threshold: float = 0.5
    iou_thresholds: List[float] = field(default_factory=lambda: [round(0.5 + 0.05 * i, 2) for i in range(10)])
    top_ns: List[int] = field(default_factory=lambda: [1, 5, 10, 20, 50, 100])
    recall_targets: List[float] = field(default_factory=lambda: [0.5, 0.75, 0.9, 0.95])
    iterations: Optional[List[int]] = None
    use_11_point: bool = False
    runs: int = 20
    limit: Optional[int] = None

    def to_json(self):
        return json.dumps(dataclasses.asdict(self), indent=1, sort_keys=True)


def _csv_floats(text):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _csv_ints(text):
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def build_parser():
    p = _Parser(prog="hypernet", description="Hyper Feature region proposals and detection (numpy).")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def cmd(name, help_):
        s = sub.add_parser(name, help=help_)
        # argparse.SUPPRESS keeps unset flags out of the namespace so file values survive
        s.add_argument("--config", default=argparse.SUPPRESS, help="RunConfig JSON; flags override it")
        return s

    def flag(s, *names, **kw):
        s.add_argument(*names, default=argparse.SUPPRESS, **kw)

    s = cmd("gen-data", "write a synthetic shapes dataset")
    flag(s, "--count", type=int)
    flag(s, "--size", type=int)
    flag(s, "--classes", type=int)
    flag(s, "--seed", type=int)
    flag(s, "--out")

    s = cmd("train", "run the six-step joint training schedule")
    flag(s, "--data")
    flag(s, "--plan", help="TrainPlan JSON file")
    flag(s, "--iterations", type=_csv_ints, help="steps 2-5 iteration counts, e.g. 2000,2000,1000,1000")
    flag(s, "--variant", choices=["basic", "sp"])
    flag(s, "--classes", type=int)
    flag(s, "--seed", type=int)
    flag(s, "--out")

    for name, what in (("propose", "region proposals"), ("detect", "detections")):
        s = cmd(name, f"write per-image {what} as JSON")
        flag(s, "--model")
        flag(s, "--data")
        flag(s, "--top-k", dest="top_k", type=int)
        flag(s, "--variant", choices=["basic", "sp"])
        flag(s, "--out")
        if name == "detect":
            flag(s, "--proposals", help="directory of proposal JSON from `propose` (optional)")

    s = cmd("eval-proposals", "recall curves and proposals-needed table")
    flag(s, "--proposals")
    flag(s, "--data")
    flag(s, "--iou-thresholds", dest="iou_thresholds", type=_csv_floats)
    flag(s, "--top-ns", dest="top_ns", type=_csv_ints)
    flag(s, "--recall-targets", dest="recall_targets", type=_csv_floats)
    flag(s, "--iou-threshold", dest="iou_threshold", type=float)
    flag(s, "--top-k", dest="top_k", type=int, help="N for the recall-vs-IoU table (default 100)")
    flag(s, "--out")

    s = cmd("eval-detections", "per-class AP and mAP")
    flag(s, "--detections")
    flag(s, "--data")
    flag(s, "--iou-threshold", dest="iou_threshold", type=float)
    flag(s, "--classes", type=int)
    flag(s, "--use-11-point", dest="use_11_point", action="store_true")
    flag(s, "--out")

    s = cmd("bench", "median per-stage timing, basic vs sp")
    flag(s, "--model")
    flag(s, "--data")
    flag(s, "--variant", choices=["basic", "sp", "both"])
    flag(s, "--runs", type=int)
    flag(s, "--seed", type=int)
    flag(s, "--out")

    s = cmd("viz-hyper", "Hyper Feature heatmaps as P5 graymaps")
    flag(s, "--model")
    flag(s, "--data")
    flag(s, "--limit", type=int)
    flag(s, "--out")
    return p


def resolve(args) -> RunConfig:
    """Defaults < ``--config`` file < explicit flags."""
    values = {}
    if "config" in args:
        try:
            doc = json.loads(Path(args.config).read_text())
        except FileNotFoundError:
            raise DataFormatError(f"config file {args.config} not found") from None
        except json.JSONDecodeError as e:
            raise DataFormatError(f"{args.config}: invalid JSON at byte {e.pos}: {e.msg}") from None
        known = {f.name for f in dataclasses.fields(RunConfig)}
        unknown = sorted(set(doc) - known)
        if unknown:
            raise UsageError(f"{args.config}: unknown RunConfig field(s) {', '.join(unknown)}")
        values.update(doc)
    values.update({k: v for k, v in vars(args).items() if k not in ("config", "verbose")})
    return RunConfig(**values)


def _require(cfg, *names):
    missing = [n for n in names if getattr(cfg, n) in (None, "")]
    if missing:
        flags = ", ".join("--" + n.replace("_", "-") for n in missing)
        raise UsageError(f"{cfg.command}: missing required {flags}")


def _out_dir(cfg):
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "run_config.json").write_text(cfg.to_json())
    return out


def _load_model(cfg):
    if not Path(cfg.model).exists():
        raise DataFormatError(f"model checkpoint {cfg.model} not found")
    model = load_checkpoint(cfg.model)
    if cfg.variant not in (None, "both") and cfg.variant != model.config.variant:
        model = model.with_variant(cfg.variant)
    return model


def _dataset(path):
    if not Path(path).is_dir():
        raise DataFormatError(f"data directory {path} not found")
    return read_dataset(path)


def _prediction_doc(sample, objects):
    doc = annotation_dict(sample)
    doc["objects"] = objects
    return doc


def _read_predictions(directory, ids):
    d = Path(directory)
    if not d.is_dir():
        raise DataFormatError(f"prediction directory {directory} not found")
    out = []
    for i in ids:
        path = d / f"{i}.json"
        if not path.exists():
            raise DataFormatError(f"{path}: missing prediction file for sample {i}")
        try:
            doc = json.loads(path.read_text())
        except json.JSONDecodeError as e:
            raise DataFormatError(f"{path}: invalid JSON at byte {e.pos}: {e.msg}") from None
        objs = parse_objects(doc, str(path))
        boxes = np.asarray([tuple(b) for b, _, _ in objs], dtype=np.float64).reshape(-1, 4)
        scores = np.asarray([float(o.get("score", 1.0)) for _, _, o in objs])
        classes = np.asarray([c for _, c, _ in objs], dtype=np.int64)
        out.append((boxes, scores, classes))
    return out


def _box_obj(box, **extra):
    return {"x_min": float(box[0]), "y_min": float(box[1]), "x_max": float(box[2]), "y_max": float(box[3]), **extra}


# -- commands -----------------------------------------------------------------------

def cmd_gen_data(cfg):
    _require(cfg, "out")
    samples = generate_shapes_dataset(cfg.count, cfg.size, cfg.classes, cfg.seed)
    out = _out_dir(cfg)
    write_dataset(samples, out)
    per_class = {c: 0 for c in range(1, cfg.classes + 1)}
    for s in samples:
        for _, c in s.annotations:
            per_class[c] += 1
    print(f"wrote {len(samples)} images to {out}; boxes per class: "
          + ", ".join(f"{c}={n}" for c, n in per_class.items()))


def cmd_train(cfg):
    _require(cfg, "data", "out")
    data = _dataset(cfg.data)
    plan = TrainPlan()
    if cfg.plan:
        try:
            plan = TrainPlan.from_dict(json.loads(Path(cfg.plan).read_text()))
        except FileNotFoundError:
            raise DataFormatError(f"plan file {cfg.plan} not found") from None
        except (json.JSONDecodeError, TypeError) as e:
            raise DataFormatError(f"{cfg.plan}: bad TrainPlan ({e})") from None
    plan = dataclasses.replace(plan, seed=cfg.seed)
    if cfg.iterations is not None:
        if len(cfg.iterations) != 4 or min(cfg.iterations) < 0:
            raise UsageError("train: --iterations needs four non-negative counts (steps 2-5)")
        plan = dataclasses.replace(plan, iterations=tuple(cfg.iterations))
    cfg.iterations = list(plan.iterations)
    out = _out_dir(cfg)
    cfg.variant = cfg.variant or "sp"
    config = desk_config(num_classes=cfg.classes, variant=cfg.variant)
    config = dataclasses.replace(config, short_side=int(min(data[0].image.shape[-2:])))
    (out / "plan.json").write_text(json.dumps(plan.to_dict(), indent=1, sort_keys=True))

    def on_stage(name, model):
        save_checkpoint(out / f"{name}.ckpt", model, name)
        log.info("stage %s done", name)

    t0 = time.perf_counter()
    with open(out / "metrics.jsonl", "w") as sink:
        res = run_joint_training(data, plan, config, sink=sink, on_stage=on_stage)
    save_checkpoint(out / "model.ckpt", res.model, "step6_unified")
    final = f"final loss {res.records[-1]['total']:.4f}" if res.records else "no iterations run"
    print(f"trained on {len(data)} images in {time.perf_counter() - t0:.1f} s; {final}; "
          f"model at {out / 'model.ckpt'}")


def cmd_propose(cfg):
    _require(cfg, "model", "data", "out")
    model = _load_model(cfg)
    ids = list_sample_ids(cfg.data)
    if not ids:
        raise DataFormatError(f"{cfg.data}: no samples found")
    top_k = cfg.top_k if cfg.top_k is not None else model.config.proposal.top_k_test
    if top_k < 1:
        raise UsageError("propose: --top-k must be >= 1")
    out = _out_dir(cfg)
    total = 0
    for i in ids:
        s = read_sample(cfg.data, i)
        boxes, scores = model.propose(s.image.astype(model.dtype), top_k=top_k)
        objs = [_box_obj(b, score=float(sc)) for b, sc in zip(boxes, scores)]
        (out / f"{i}.json").write_text(json.dumps(_prediction_doc(s, objs), indent=1))
        total += len(objs)
    print(f"wrote proposals for {len(ids)} images ({total / len(ids):.1f} per image) to {out}")


def cmd_detect(cfg):
    _require(cfg, "model", "data", "out")
    model = _load_model(cfg)
    ids = list_sample_ids(cfg.data)
    if not ids:
        raise DataFormatError(f"{cfg.data}: no samples found")
    given = _read_predictions(cfg.proposals, ids) if cfg.proposals else None
    out = _out_dir(cfg)
    total = 0
    for k, i in enumerate(ids):
        s = read_sample(cfg.data, i)
        hyper = model.hyper(s.image.astype(model.dtype))
        hw = s.image.shape[-2:]
        if given is not None:
            proposals = given[k][0][: cfg.top_k] if cfg.top_k else given[k][0]
        else:
            proposals, _ = model.propose(hyper=hyper, image_hw=hw, top_k=cfg.top_k)
        dets = model.detect(hyper=hyper, proposals=proposals, image_hw=hw)
        objs = [_box_obj(d.box, score=d.score, **{"class": d.class_id}) for d in dets]
        (out / f"{i}.json").write_text(json.dumps(_prediction_doc(s, objs), indent=1))
        total += len(objs)
    print(f"wrote {total} detections for {len(ids)} images to {out}")


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(header)
        w.writerows(rows)


def cmd_eval_proposals(cfg):
    _require(cfg, "proposals", "data", "out")
    data = _dataset(cfg.data)
    preds = _read_predictions(cfg.proposals, [s.id for s in data])
    proposals = [(b, s) for b, s, _ in preds]
    gts = [s.boxes for s in data]
    if not sum(len(g) for g in gts):
        raise DataFormatError(f"{cfg.data}: no ground-truth boxes, recall is undefined")
    out = _out_dir(cfg)
    top_n = cfg.top_k or 100
    rep = EvalReport(metadata={"seed": cfg.seed, "dataset": str(cfg.data), "images": len(data)})
    by_iou = {n: recall_vs_iou(proposals, gts, cfg.iou_thresholds, n) for n in cfg.top_ns}
    _write_csv(out / "recall_vs_iou.csv", ["iou"] + [f"recall@{n}" for n in cfg.top_ns],
               [[t] + [by_iou[n][j] for n in cfg.top_ns] for j, t in enumerate(cfg.iou_thresholds)])
    by_n = {t: recall_vs_n(proposals, gts, t, cfg.top_ns) for t in cfg.iou_thresholds}
    _write_csv(out / "recall_vs_n.csv", ["n"] + [f"recall@iou{t}" for t in cfg.iou_thresholds],
               [[n] + [by_n[t][j] for t in cfg.iou_thresholds] for j, n in enumerate(cfg.top_ns)])
    needed = {str(r): proposals_needed(proposals, gts, r, cfg.iou_threshold) for r in cfg.recall_targets}
    _write_csv(out / "proposals_needed.csv", ["recall_target", "iou", "proposals"],
               [[r, cfg.iou_threshold, "unreached" if n is None else n] for r, n in needed.items()])
    rep.recall_vs_iou = {str(n): v for n, v in by_iou.items()}
    rep.recall_vs_n = {str(t): v for t, v in by_n.items()}
    rep.proposals_needed = needed
    (out / "report.json").write_text(rep.to_json())
    at = recall_vs_iou(proposals, gts, [cfg.iou_threshold], top_n)[0]
    print(f"recall@{top_n} (IoU {cfg.iou_threshold}) = {at:.4f}; proposals needed: "
          + ", ".join(f"{r}->{n if n is not None else 'unreached'}" for r, n in needed.items()))


def cmd_eval_detections(cfg):
    _require(cfg, "detections", "data", "out")
    data = _dataset(cfg.data)
    preds = _read_predictions(cfg.detections, [s.id for s in data])
    dets = [{"boxes": b, "scores": s, "classes": c} for b, s, c in preds]
    gts = [(s.boxes, s.classes) for s in data]
    out = _out_dir(cfg)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        try:
            m, aps = mean_average_precision(dets, gts, cfg.classes, cfg.iou_threshold, cfg.use_11_point)
        except ValueError as e:
            raise DataFormatError(f"{cfg.data}: {e}") from None
    for w in caught:
        print(f"note: {w.message}")
    _write_csv(out / "ap.csv", ["class", "ap"], [[c, a] for c, a in aps.items()] + [["mean", m]])
    rep = EvalReport(ap_per_class=aps, map=m, metadata={"dataset": str(cfg.data), "images": len(data),
                                                         "iou": cfg.iou_threshold})
    (out / "report.json").write_text(rep.to_json())
    print(f"mAP@{cfg.iou_threshold} = {m:.4f} (" + ", ".join(f"class {c}: {a:.4f}" for c, a in aps.items()) + ")")


def cmd_bench(cfg):
    _require(cfg, "data", "out")
    data = _dataset(cfg.data)
    if cfg.model:
        model = _load_model(dataclasses.replace(cfg, variant=None))
    else:
        model = HyperNetModel.initialize(desk_config(num_classes=cfg.classes), seed=cfg.seed)
    variants = ["basic", "sp"] if cfg.variant in (None, "both") else [cfg.variant]
    images = [s.image.astype(model.dtype) for s in data[: max(1, min(len(data), 5))]]
    out = _out_dir(cfg)
    records = []
    for v in variants:
        rec = benchmark_stages(model, images, v, runs=cfg.runs)
        records.append(rec)
        print(f"{v:>5}: shared {rec.shared_conv_ms:8.2f} ms  proposal {rec.proposal_ms:9.2f} ms  "
              f"detection {rec.detection_ms:8.2f} ms  total {rec.total_ms:9.2f} ms  "
              f"({rec.num_candidates} candidates)")
    timing = [{k: v for k, v in dataclasses.asdict(r).items() if k != "samples"} for r in records]
    doc = {"timing": timing}
    if len(records) == 2:
        doc["proposal_speedup"] = records[0].proposal_ms / records[1].proposal_ms
        doc["total_speedup"] = records[0].total_ms / records[1].total_ms
        print(f"sp speedup: proposal x{doc['proposal_speedup']:.1f}, total x{doc['total_speedup']:.1f}")
    (out / "timing.json").write_text(json.dumps(doc, indent=1, sort_keys=True))


def cmd_viz_hyper(cfg):
    _require(cfg, "model", "data", "out")
    model = _load_model(dataclasses.replace(cfg, variant=None))
    ids = list_sample_ids(cfg.data)
    if not ids:
        raise DataFormatError(f"{cfg.data}: no samples found")
    ids = ids[: cfg.limit] if cfg.limit else ids
    out = _out_dir(cfg)
    for i in ids:
        s = read_sample(cfg.data, i)
        export_hyper_heatmap(model.hyper(s.image.astype(model.dtype)), out / f"{i}.pgm")
    print(f"wrote {len(ids)} heatmaps to {out}")


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "propose": cmd_propose,
    "detect": cmd_detect,
    "eval-proposals": cmd_eval_proposals,
    "eval-detections": cmd_eval_detections,
    "bench": cmd_bench,
    "viz-hyper": cmd_viz_hyper,
}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not args.command:
            raise UsageError("hypernet: a command is required (" + ", ".join(COMMANDS) + ")")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(message)s")
        cfg = resolve(args)
        # non-finite losses are caught explicitly; keep numpy warnings off the error stream
        with np.errstate(all="ignore"):
            COMMANDS[cfg.command](cfg)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (DataFormatError, FileNotFoundError, IsADirectoryError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    except TrainingDiverged as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except FloatingPointError as e:
        print(f"error: numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
