import json
import struct
import time

import numpy as np
import pytest

from hypernet.config import desk_config
from hypernet.data_io import (CLASS_COLORS, MAGIC, DataFormatError, Sample, checkpoint_bytes, encode_pgm, encode_ppm,
                              generate_shapes_dataset, list_sample_ids, load_checkpoint, parse_checkpoint,
                              parse_pnm, read_dataset, read_sample, save_checkpoint, split_dataset,
                              write_dataset, write_sample)
from hypernet.geometry import Box
from hypernet.model import HyperNetModel


class TestGenerator:
    def test_deterministic(self):
        a = generate_shapes_dataset(5, seed=7)
        b = generate_shapes_dataset(5, seed=7)
        assert all(x.image.tobytes() == y.image.tobytes() and x.annotations == y.annotations for x, y in zip(a, b))
        c = generate_shapes_dataset(5, seed=8)
        assert a[0].image.tobytes() != c[0].image.tobytes()

    def test_contract(self):
        data = generate_shapes_dataset(60, seed=1)
        classes = set()
        for s in data:
            assert s.image.shape == (3, 128, 128) and s.image.dtype == np.float32
            assert 0 <= s.image.min() and s.image.max() <= 1
            assert 1 <= len(s.annotations) <= 4
            for box, c in s.annotations:
                assert 0 <= box.x_min < box.x_max <= 128 and 0 <= box.y_min < box.y_max <= 128
                assert box.width * box.height >= 64
                classes.add(c)
        assert classes == {1, 2, 3}

    def test_boxes_are_tight(self):
        s = generate_shapes_dataset(1, seed=2)[0]
        box, c = s.annotations[0]
        x0, y0, x1, y1 = (int(v) for v in box)
        inside = s.image[:, y0:y1, x0:x1]
        # the painted shape touches every edge of its box
        target = np.asarray(CLASS_COLORS[c])[:, None, None]
        hit = (np.abs(inside - target) <= 0.09).all(axis=0)
        assert hit[0].any() and hit[-1].any() and hit[:, 0].any() and hit[:, -1].any()

    def test_budget(self):
        t0 = time.perf_counter()
        generate_shapes_dataset(100, seed=3)
        assert time.perf_counter() - t0 < 10

    def test_class_range(self):
        assert {c for s in generate_shapes_dataset(20, num_classes=1, seed=0) for _, c in s.annotations} == {1}
        with pytest.raises(ValueError):
            generate_shapes_dataset(1, num_classes=4)

    def test_split(self):
        data = generate_shapes_dataset(10, image_size=64, seed=0)
        train, test = split_dataset(data, 3)
        assert len(train) == 7 and [s.id for s in test] == [s.id for s in data[7:]]


class TestSampleIO:
    def test_round_trip(self, tmp_path):
        data = generate_shapes_dataset(3, image_size=64, seed=4)
        write_dataset(data, tmp_path)
        assert list_sample_ids(tmp_path) == [s.id for s in data]
        back = read_dataset(tmp_path)
        for a, b in zip(data, back):
            assert a.image.tobytes() == b.image.tobytes()
            assert a.annotations == b.annotations and a.id == b.id

    def test_ppm_quantisation(self):
        img = np.random.default_rng(0).random((3, 5, 7))
        pix = parse_pnm(encode_ppm(img))
        assert pix.shape == (5, 7, 3)
        np.testing.assert_allclose(pix.transpose(2, 0, 1) / 255, img, atol=0.5 / 255 + 1e-12)

    def test_header_comments(self):
        data = b"P6\n# made by hand\n2 1 # width height\n255\n" + bytes(range(6))
        assert parse_pnm(data).ravel().tolist() == list(range(6))

    def test_pgm(self):
        gray = np.arange(12, dtype=np.uint8).reshape(3, 4)
        np.testing.assert_array_equal(parse_pnm(encode_pgm(gray), b"P5")[:, :, 0], gray)

    def test_truncated_payload(self):
        data = encode_ppm(np.zeros((3, 4, 4)))[:-5]
        with pytest.raises(DataFormatError, match="truncated payload"):
            parse_pnm(data)

    @pytest.mark.parametrize("data,msg", [(b"P3\n1 1\n255\n000", "bad magic"), (b"P6\n1 x\n255\n000", "byte"),
                                          (b"P6\n1 1\n65535\n000000", "unsupported"), (b"P6\n1", "end of header")])
    def test_bad_headers(self, data, msg):
        with pytest.raises(DataFormatError, match=msg):
            parse_pnm(data)

    def test_degenerate_box_rejected(self, tmp_path):
        s = generate_shapes_dataset(1, image_size=64, seed=5)[0]
        write_sample(s, tmp_path)
        doc = json.loads((tmp_path / f"{s.id}.json").read_text())
        doc["objects"][0]["x_max"] = doc["objects"][0]["x_min"]
        (tmp_path / f"{s.id}.json").write_text(json.dumps(doc))
        with pytest.raises(DataFormatError, match="x_max <= x_min"):
            read_sample(tmp_path, s.id)

    def test_bad_json_names_offset(self, tmp_path):
        s = generate_shapes_dataset(1, image_size=64, seed=5)[0]
        write_sample(s, tmp_path)
        (tmp_path / f"{s.id}.json").write_text('{"id": "x",, }')
        with pytest.raises(DataFormatError, match="byte 11"):
            read_sample(tmp_path, s.id)

    def test_missing_field(self, tmp_path):
        s = generate_shapes_dataset(1, image_size=64, seed=5)[0]
        write_sample(s, tmp_path)
        (tmp_path / f"{s.id}.json").write_text('{"id": "x", "width": 64, "objects": []}')
        with pytest.raises(DataFormatError, match="height"):
            read_sample(tmp_path, s.id)

    def test_out_of_bounds_box(self):
        with pytest.raises(DataFormatError):
            Sample(np.zeros((3, 10, 10)), [(Box(0, 0, 11, 5), 1)])
        with pytest.raises(DataFormatError):
            Sample(np.zeros((3, 10, 10)), [(Box(0, 0, 5, 5), 0)])

    def test_empty_directory(self, tmp_path):
        with pytest.raises(DataFormatError):
            read_dataset(tmp_path)


@pytest.fixture(scope="module")
def model():
    return HyperNetModel.initialize(desk_config(variant="sp"), seed=3)


class TestCheckpoint:
    def test_save_load_save_identical(self, tmp_path, model):
        p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        save_checkpoint(p1, model, "step4_proposal")
        loaded = load_checkpoint(p1)
        assert loaded.stage == "step4_proposal" and loaded.config == model.config
        save_checkpoint(p2, loaded, "step4_proposal")
        assert p1.read_bytes() == p2.read_bytes()

    def test_framing(self, model):
        data = checkpoint_bytes(model)
        assert data[:8] == MAGIC
        version, hlen = struct.unpack("<IQ", data[8:20])
        header = json.loads(data[20 : 20 + hlen])
        assert version == 1 and header["precision"] == 32
        assert header["tensors"] == sorted(model.state_dict())

    def test_inference_identical_after_load(self, tmp_path, model):
        save_checkpoint(tmp_path / "m.ckpt", model)
        loaded = load_checkpoint(tmp_path / "m.ckpt")
        img = np.random.default_rng(1).random((3, 64, 64)).astype(np.float32)
        a, b = model.propose(img), loaded.propose(img)
        assert a[0].tobytes() == b[0].tobytes() and a[1].tobytes() == b[1].tobytes()
        assert model.detect(img) == loaded.detect(img)

    def test_float64_header_flag(self, model):
        header, tensors = parse_checkpoint(checkpoint_bytes(model.astype(np.float64)))
        assert header["precision"] == 64
        assert all(t.dtype == np.float64 for t in tensors.values())

    def test_bad_magic(self, tmp_path, model):
        data = bytearray(checkpoint_bytes(model))
        data[0:1] = b"X"
        (tmp_path / "bad.ckpt").write_bytes(bytes(data))
        with pytest.raises(DataFormatError, match="bad magic"):
            load_checkpoint(tmp_path / "bad.ckpt")

    def test_huge_header_length_rejected_without_allocation(self):
        data = MAGIC + struct.pack("<IQ", 1, 2**62)
        with pytest.raises(DataFormatError, match="truncated"):
            parse_checkpoint(data)

    def test_unknown_version(self, model):
        data = bytearray(checkpoint_bytes(model))
        data[8:12] = struct.pack("<I", 9)
        with pytest.raises(DataFormatError, match="version 9"):
            parse_checkpoint(bytes(data))

    def test_truncated(self, model):
        with pytest.raises(DataFormatError, match="truncated"):
            parse_checkpoint(checkpoint_bytes(model)[:-3])

    def test_trailing_bytes(self, model):
        with pytest.raises(DataFormatError, match="trailing"):
            parse_checkpoint(checkpoint_bytes(model) + b"\0")

    def test_architecture_mismatch_names_tensor(self, tmp_path, model):
        save_checkpoint(tmp_path / "m.ckpt", model)
        other = HyperNetModel.initialize(desk_config(num_classes=5), seed=0)
        with pytest.raises(DataFormatError, match=r"detection\.cls\.bias.*\(4,\).*\(6,\)"):
            load_checkpoint(tmp_path / "m.ckpt", other)
        narrow = HyperNetModel.initialize(desk_config().with_taps((3, 5)), seed=0)
        with pytest.raises(DataFormatError, match="tensor"):
            load_checkpoint(tmp_path / "m.ckpt", narrow)
