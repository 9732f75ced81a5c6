"""Six-step joint training on synthetic shapes, then proposal recall and detection mAP.

A short schedule keeps this to a few minutes on one core; the acceptance suite runs the full one.
"""
import time

from hypernet import (TrainPlan, desk_config, generate_shapes_dataset, mean_average_precision, recall_at,
                      run_joint_training, split_dataset)

data = generate_shapes_dataset(240, seed=11)
train, test = split_dataset(data, 40)
plan = TrainPlan(iterations=(800, 800, 400, 400), log_every=100)

t0 = time.perf_counter()
result = run_joint_training(train, plan, desk_config(variant="sp"))
print(f"trained in {time.perf_counter() - t0:.0f} s")
for rec in result.records:
    if rec["iteration"] == 0:
        print(f"  {rec['stage']:<16} first loss {rec['total']:.3f}")
model = result.model

props, dets = [], []
for s in test:
    h = model.hyper(s.image)
    boxes, scores = model.propose(hyper=h, image_hw=s.image.shape[-2:])
    props.append((boxes, scores))
    dets.append(model.detect(hyper=h, proposals=boxes, image_hw=s.image.shape[-2:]))

gts = [s.boxes for s in test]
for n in (10, 50, 100):
    print(f"recall@{n}: IoU0.5 {recall_at(props, gts, 0.5, n):.3f}  IoU0.7 {recall_at(props, gts, 0.7, n):.3f}")
m, aps = mean_average_precision(dets, [(s.boxes, s.classes) for s in test], 3)
print("AP per class:", {c: round(a, 3) for c, a in aps.items()}, "mAP:", round(m, 3))
