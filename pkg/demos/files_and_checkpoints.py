"""Dataset files on disk and a checkpoint round trip."""
import tempfile
from pathlib import Path

import numpy as np

from hypernet import (HyperNetModel, desk_config, generate_shapes_dataset, load_checkpoint, read_dataset,
                      save_checkpoint, write_dataset)

with tempfile.TemporaryDirectory() as tmp:
    tmp = Path(tmp)
    data = generate_shapes_dataset(3, seed=5)
    write_dataset(data, tmp / "data")
    print(sorted(p.name for p in (tmp / "data").iterdir()))
    print((tmp / "data" / f"{data[0].id}.json").read_text())
    back = read_dataset(tmp / "data")
    print("images identical after reload:", all(a.image.tobytes() == b.image.tobytes() for a, b in zip(data, back)))

    model = HyperNetModel.initialize(desk_config(variant="sp"), seed=2)
    save_checkpoint(tmp / "m.ckpt", model, "step1_init")
    loaded = load_checkpoint(tmp / "m.ckpt")
    a, b = model.propose(back[0].image), loaded.propose(back[0].image)
    print("checkpoint bytes:", (tmp / "m.ckpt").stat().st_size, "stage:", loaded.stage)
    print("proposals bit-identical:", np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1]))
