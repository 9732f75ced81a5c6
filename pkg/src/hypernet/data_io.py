"""Synthetic shapes dataset, sample files (PPM + JSON) and checkpoints.

Checkpoint layout (all integers little-endian)::

    magic      8 bytes  b"HYPRNET\\0"
    version    u32      1
    header_len u64      then header_len bytes of UTF-8 JSON
                        {config, stage, precision, tensors: [names...]}
    records    per tensor, in header order:
               u32 name_len, name, u8 itemsize (4|8), u32 ndim, ndim * u32 dims,
               u64 payload_len, payload
"""
from __future__ import annotations

import io
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Tuple

import numpy as np

from .config import HyperNetConfig
from .geometry import Box
from .model import HyperNetModel

MAGIC = b"HYPRNET\x00"
VERSION = 1
SHAPE_NAMES = {1: "rectangle", 2: "ellipse", 3: "triangle"}
# RGB fill per class; background is mid-grey noise
CLASS_COLORS = {1: (0.85, 0.25, 0.2), 2: (0.2, 0.8, 0.3), 3: (0.25, 0.3, 0.9)}


class DataFormatError(ValueError):
    """Malformed sample or checkpoint file."""


@dataclass
class Sample:
    image: np.ndarray  # (3, H, W), values in [0, 1]
    annotations: List[Tuple[Box, int]] = field(default_factory=list)
    id: str = ""

    def __post_init__(self):
        _, h, w = self.image.shape
        for box, cls in self.annotations:
            if not box.is_valid():
                raise DataFormatError(f"{self.id}: degenerate box {tuple(box)}")
            if box.x_min < 0 or box.y_min < 0 or box.x_max > w or box.y_max > h:
                raise DataFormatError(f"{self.id}: box {tuple(box)} outside {w}x{h} image")
            if cls < 1:
                raise DataFormatError(f"{self.id}: class id must be >= 1")

    @property
    def boxes(self):
        return np.asarray([tuple(b) for b, _ in self.annotations], dtype=np.float64).reshape(-1, 4)

    @property
    def classes(self):
        return np.asarray([c for _, c in self.annotations], dtype=np.int64)


def _shape_mask(kind, h, w):
    yy, xx = np.mgrid[0:h, 0:w] + 0.5
    if kind == 1:
        return np.ones((h, w), bool)
    if kind == 2:
        return ((xx - w / 2) / (w / 2)) ** 2 + ((yy - h / 2) / (h / 2)) ** 2 <= 1
    # isosceles triangle, apex top centre, base along the bottom row
    half = (w / 2) * (yy / h)
    return np.abs(xx - w / 2) <= half


def _draw_image(rng, size, num_classes, max_objects=4, min_side=12, max_side=56):
    image = np.clip(rng.uniform(0.35, 0.6) + rng.normal(0, 0.04, (3, size, size)), 0, 1)
    annotations = []
    placed = []
    max_side = min(max_side, size)
    min_side = min(min_side, max_side)
    n = int(rng.integers(1, max_objects + 1))
    attempts = 0
    while len(annotations) < n and attempts < 100:
        attempts += 1
        kind = int(rng.integers(1, num_classes + 1))
        w = int(rng.integers(min_side, max_side + 1))
        h = int(rng.integers(min_side, max_side + 1))
        x0 = int(rng.integers(0, size - w + 1))
        y0 = int(rng.integers(0, size - h + 1))
        if any(x0 < bx1 + 2 and bx0 < x0 + w + 2 and y0 < by1 + 2 and by0 < y0 + h + 2
               for bx0, by0, bx1, by1 in placed):
            continue
        mask = _shape_mask(kind, h, w)
        ys, xs = np.nonzero(mask)
        box = Box(float(x0 + xs.min()), float(y0 + ys.min()), float(x0 + xs.max() + 1), float(y0 + ys.max() + 1))
        if box.width * box.height < 64:
            continue
        color = np.clip(np.asarray(CLASS_COLORS[kind]) + rng.uniform(-0.08, 0.08, 3), 0, 1)
        region = image[:, y0 : y0 + h, x0 : x0 + w]
        region[:, mask] = color[:, None]
        placed.append((x0, y0, x0 + w, y0 + h))
        annotations.append((box, kind))
    return image, annotations


def quantize(image):
    return (np.round(np.clip(image, 0, 1) * 255) / 255).astype(np.float32)


def generate_shapes_dataset(count, image_size=128, num_classes=3, seed=0, prefix="img"):
    """``count`` images with 1-4 non-overlapping filled shapes each.

    Classes: 1 rectangle, 2 ellipse, 3 triangle, each with its own fill
    colour.  Boxes are the exact pixel extents of the painted shapes and
    images are already quantised to 8 bits, so disk round trips are exact.
    """
    if not 1 <= num_classes <= 3:
        raise ValueError("the shapes generator provides 1 to 3 classes")
    rng = np.random.default_rng(seed)
    samples = []
    for i in range(count):
        image, ann = _draw_image(rng, image_size, num_classes)
        samples.append(Sample(quantize(image), ann, f"{prefix}{i:05d}"))
    return samples


# -- PPM / PGM ----------------------------------------------------------------

def _read_token(data, pos):
    n = len(data)
    while pos < n:
        c = data[pos : pos + 1]
        if c == b"#":
            while pos < n and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif c.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not data[pos : pos + 1].isspace() and data[pos : pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise DataFormatError(f"unexpected end of header at byte {start}")
    return data[start:pos], pos


def parse_pnm(data, expect=b"P6"):
    """Decode a binary PPM (P6) or PGM (P5) into an ``(H, W, C)`` uint8 array."""
    magic, pos = _read_token(data, 0)
    if magic != expect:
        raise DataFormatError(f"bad magic {magic!r} at byte 0, expected {expect!r}")
    fields = []
    for _ in range(3):
        tok_start = pos
        tok, pos = _read_token(data, pos)
        if not tok.isdigit():
            raise DataFormatError(f"non-numeric header field {tok!r} near byte {tok_start}")
        fields.append(int(tok))
    w, h, maxval = fields
    if maxval != 255 or w < 1 or h < 1:
        raise DataFormatError(f"unsupported header (width {w}, height {h}, maxval {maxval}) near byte {pos}")
    pos += 1  # single whitespace after maxval
    channels = 3 if expect == b"P6" else 1
    need = w * h * channels
    payload = data[pos : pos + need]
    if len(payload) < need:
        raise DataFormatError(f"truncated payload: {len(payload)} of {need} bytes starting at byte {pos}")
    return np.frombuffer(payload, dtype=np.uint8).reshape(h, w, channels)


def encode_ppm(image):
    """``(3, H, W)`` float image in [0, 1] -> P6 bytes."""
    arr = np.round(np.clip(image, 0, 1) * 255).astype(np.uint8).transpose(1, 2, 0)
    h, w = arr.shape[:2]
    return f"P6\n{w} {h}\n255\n".encode() + arr.tobytes()


def encode_pgm(gray):
    gray = np.asarray(gray, dtype=np.uint8)
    h, w = gray.shape
    return f"P5\n{w} {h}\n255\n".encode() + gray.tobytes()


def annotation_dict(sample: Sample):
    _, h, w = sample.image.shape
    return {
        "id": sample.id,
        "width": int(w),
        "height": int(h),
        "objects": [{"class": int(c), "x_min": b.x_min, "y_min": b.y_min, "x_max": b.x_max, "y_max": b.y_max}
                    for b, c in sample.annotations],
    }


def parse_objects(doc, where=""):
    """Validate the ``objects`` list of an annotation/prediction document."""
    out = []
    objs = doc.get("objects")
    if not isinstance(objs, list):
        raise DataFormatError(f"{where}: field 'objects' missing or not a list")
    for i, o in enumerate(objs):
        try:
            box = Box(float(o["x_min"]), float(o["y_min"]), float(o["x_max"]), float(o["y_max"]))
            cls = int(o.get("class", 1))
        except (KeyError, TypeError, ValueError) as e:
            raise DataFormatError(f"{where}: objects[{i}] has a missing or bad field ({e})") from None
        if not box.is_valid():
            raise DataFormatError(f"{where}: objects[{i}] has x_max <= x_min or y_max <= y_min")
        out.append((box, cls, o))
    return out


def write_sample(sample: Sample, directory):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    (d / f"{sample.id}.ppm").write_bytes(encode_ppm(sample.image))
    (d / f"{sample.id}.json").write_text(json.dumps(annotation_dict(sample), indent=1, sort_keys=True))


def read_sample(directory, sample_id) -> Sample:
    d = Path(directory)
    jpath = d / f"{sample_id}.json"
    try:
        doc = json.loads(jpath.read_text())
    except json.JSONDecodeError as e:
        raise DataFormatError(f"{jpath}: invalid JSON at byte {e.pos}: {e.msg}") from None
    for key in ("id", "width", "height"):
        if key not in doc:
            raise DataFormatError(f"{jpath}: missing field '{key}'")
    pix = parse_pnm((d / f"{sample_id}.ppm").read_bytes())
    h, w = pix.shape[:2]
    if (h, w) != (doc["height"], doc["width"]):
        raise DataFormatError(f"{jpath}: size {doc['width']}x{doc['height']} disagrees with image {w}x{h}")
    image = (pix.transpose(2, 0, 1).astype(np.float32) / 255).astype(np.float32)
    ann = [(b, c) for b, c, _ in parse_objects(doc, str(jpath))]
    return Sample(image, ann, str(doc["id"]))


def write_dataset(samples, directory):
    for s in samples:
        write_sample(s, directory)


def list_sample_ids(directory):
    return sorted(p.stem for p in Path(directory).glob("*.json") if (p.with_suffix(".ppm")).exists())


def read_dataset(directory):
    ids = list_sample_ids(directory)
    if not ids:
        raise DataFormatError(f"{directory}: no samples found")
    return [read_sample(directory, i) for i in ids]


def split_dataset(samples, n_holdout):
    return samples[: len(samples) - n_holdout], samples[len(samples) - n_holdout :]


# -- checkpoints ----------------------------------------------------------------

def checkpoint_bytes(model: HyperNetModel, stage="step6_unified"):
    state = model.state_dict()
    names = sorted(state)
    header = {
        "config": model.config.to_dict(),
        "stage": stage,
        "precision": int(model.dtype.itemsize * 8),
        "tensors": names,
    }
    hdr = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<IQ", VERSION, len(hdr)))
    buf.write(hdr)
    for name in names:
        arr = np.ascontiguousarray(state[name], dtype=np.dtype(model.dtype).newbyteorder("<"))
        nb = name.encode()
        buf.write(struct.pack("<I", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<BI", arr.itemsize, arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        payload = arr.tobytes()
        buf.write(struct.pack("<Q", len(payload)))
        buf.write(payload)
    return buf.getvalue()


def save_checkpoint(path, model: HyperNetModel, stage="step6_unified"):
    data = checkpoint_bytes(model, stage)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(data)
    os.replace(tmp, path)


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, n, what):
        if n > len(self.data) - self.pos:
            raise DataFormatError(f"truncated checkpoint reading {what} at byte {self.pos}")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def parse_checkpoint(data):
    """Return ``(header, {name: array})``; validates framing before allocating payloads."""
    r = _Reader(data)
    magic = r.take(len(MAGIC), "magic")
    if magic != MAGIC:
        raise DataFormatError(f"not a checkpoint: bad magic {magic!r}")
    version, hlen = r.unpack("<IQ", "version/header length")
    if version != VERSION:
        raise DataFormatError(f"unsupported checkpoint version {version}")
    try:
        header = json.loads(r.take(hlen, "header").decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise DataFormatError(f"corrupt checkpoint header: {e}") from None
    tensors = {}
    for expected in header.get("tensors", []):
        (nlen,) = r.unpack("<I", "name length")
        name = r.take(nlen, "name").decode()
        if name != expected:
            raise DataFormatError(f"record {name!r} out of order, expected {expected!r}")
        itemsize, ndim = r.unpack("<BI", "record header")
        if itemsize not in (4, 8):
            raise DataFormatError(f"{name}: unsupported precision {itemsize * 8} bits")
        shape = r.unpack(f"<{ndim}I", "dims")
        (plen,) = r.unpack("<Q", "payload length")
        if plen != int(np.prod(shape)) * itemsize:
            raise DataFormatError(f"{name}: payload length {plen} does not match shape {shape}")
        dtype = np.dtype("<f4" if itemsize == 4 else "<f8")
        tensors[name] = np.frombuffer(r.take(plen, name), dtype=dtype).reshape(shape)
    if r.pos != len(data):
        raise DataFormatError(f"trailing bytes after record {len(tensors)}")
    return header, tensors


def load_checkpoint(path, model: HyperNetModel = None):
    """Load into ``model`` (validated tensor by tensor) or build a fresh one from the header config."""
    header, tensors = parse_checkpoint(Path(path).read_bytes())
    dtype = np.float32 if header["precision"] == 32 else np.float64
    if model is None:
        config = HyperNetConfig.from_dict(header["config"])
        model = HyperNetModel.initialize(config, seed=0, dtype=dtype)
    expected = model.state_dict()
    for name in sorted(set(expected) | set(tensors)):
        if name not in tensors:
            raise DataFormatError(f"checkpoint lacks tensor {name} {expected[name].shape}")
        if name not in expected:
            raise DataFormatError(f"unexpected tensor {name} {tensors[name].shape} for this architecture")
        if tensors[name].shape != expected[name].shape:
            raise DataFormatError(f"tensor {name}: checkpoint shape {tensors[name].shape}, "
                                  f"model expects {expected[name].shape}")
    model.dtype = np.dtype(dtype)
    model.load_state_dict({k: v.copy() for k, v in tensors.items()})
    model.stage = header.get("stage")
    return model
