"""Hyper Feature extraction: multi-level taps fused into one stride-4 map."""
import sys
import time
from pathlib import Path

import numpy as np

from hypernet import HyperNetModel, desk_config, full_scale_config, generate_shapes_dataset
from hypernet.evaluation import export_hyper_heatmap

model = HyperNetModel.initialize(desk_config(), seed=0)
img = generate_shapes_dataset(1, seed=3)[0].image
h = model.hyper(img)
print(f"128x128 image -> {h.shape} (stride {model.feature_stride})")

for taps in [(1,), (3,), (5,), (3, 5), (1, 3, 5)]:
    m = HyperNetModel.initialize(desk_config().with_taps(taps), seed=0)
    print(f"taps {taps}: {m.hyper(img).shape[0]} channels")

t0 = time.perf_counter()
big = HyperNetModel.initialize(full_scale_config(), seed=0)
shape = big.hyper(np.zeros((3, 600, 1000), np.float32)).shape
print(f"600x1000 zero image -> {shape} in {time.perf_counter() - t0:.1f} s")

out = Path(sys.argv[1] if len(sys.argv) > 1 else "hyper_heatmap.pgm")
export_hyper_heatmap(h, out)
print("heatmap written to", out)
