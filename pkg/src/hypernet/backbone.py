"""Convolutional backbone with tapped stages and Hyper Feature fusion.

Shallow taps are max-pooled down to the reference stride, deep taps are
upsampled with a learnable deconvolution (bilinear init), the reference tap
passes through.  Each sampled map is compressed by a 3x3 conv + ReLU,
LRN-normalised, and the results are concatenated channel-wise.

Forward functions return ``(output, cache)``; backward functions take the
cache, accumulate parameter gradients and return input gradients.
"""
from __future__ import annotations

import numpy as np

from . import numerics as nm
from .config import BackboneConfig, FusionConfig


def check_input_extent(shape, config: BackboneConfig):
    h, w = shape[-2:]
    m = config.max_stride
    if h < 32 or w < 32 or h % m or w % m:
        raise ValueError(f"image extent {h}x{w} must be >= 32 and divisible by {m}; resize or pad first")


def backbone_forward(image, params, config: BackboneConfig):
    """Run stages up to the deepest tap; returns ``(taps, cache)`` ordered shallow to deep."""
    check_input_extent(image.shape, config)
    x = image
    feats, cache = [], []
    pad = config.kernel // 2
    for i in range(max(config.taps)):
        z = nm.conv2d_forward(x, params[f"backbone.conv{i + 1}"], config.strides[i], pad)
        cache.append((x, z))
        x = nm.relu_forward(z)
        feats.append(x)
    return [feats[t - 1] for t in config.taps], cache


def backbone_backward(cache, tap_grads, params, config: BackboneConfig):
    pad = config.kernel // 2
    grads = {t: g for t, g in zip(config.taps, tap_grads)}
    g = None
    for i in reversed(range(len(cache))):
        stage = i + 1
        if stage in grads and grads[stage] is not None:
            g = grads[stage] if g is None else g + grads[stage]
        if g is None:
            continue
        x, z = cache[i]
        g = nm.relu_backward(z, g)
        g = nm.conv2d_backward(x, params[f"backbone.conv{stage}"], g, config.strides[i], pad)
    return g


def _deconv_geometry(factor):
    # kernel 2f, stride f, crop f/2 each side -> output exactly f * input
    return 2 * factor, factor, factor // 2


def hyper_feature(taps, params, config: FusionConfig):
    """Fuse taps into the Hyper Feature cube at the reference resolution."""
    if len(taps) != len(config.taps):
        raise ValueError(f"expected {len(config.taps)} taps, got {len(taps)}")
    outs, cache = [], []
    target = None
    pad = config.kernel // 2
    lrn = config.lrn
    for i, x in enumerate(taps):
        kind, f = config.sampling(i)
        name = f"fusion.tap{config.taps[i]}"
        if kind == "pool":
            s, arg = nm.maxpool2d_forward(x, f, f)
            aux = arg
        elif kind == "deconv":
            _, stride, crop = _deconv_geometry(f)
            s = nm.deconv2d_forward(x, params[name + ".deconv"], stride, crop)
            aux = None
        else:
            s, aux = x, None
        expected = tuple(d * config.tap_strides[i] // config.reference_stride for d in x.shape[-2:])
        if s.shape[-2:] != expected or (target is not None and s.shape[-2:] != target):
            raise RuntimeError(f"tap {config.taps[i]} sampled to {s.shape[-2:]}, expected {target or expected}")
        target = s.shape[-2:]
        z = nm.conv2d_forward(s, params[name + ".conv"], 1, pad)
        a = nm.relu_forward(z)
        y = nm.lrn_forward(a, lrn.depth, lrn.alpha, lrn.beta, lrn.k)
        outs.append(y)
        cache.append((x, aux, s, z, a))
    return np.concatenate(outs, axis=-3), cache


def hyper_feature_backward(cache, grad, params, config: FusionConfig):
    """Per-tap input gradients for a gradient on the Hyper Feature."""
    if grad.shape[-3] != config.total_channels:
        raise ValueError(f"gradient has {grad.shape[-3]} channels, fusion emits {config.total_channels}")
    pad = config.kernel // 2
    lrn = config.lrn
    splits = np.cumsum(config.out_channels)[:-1]
    parts = np.split(grad, splits, axis=-3)
    tap_grads = []
    for i, (g, (x, aux, s, z, a)) in enumerate(zip(parts, cache)):
        name = f"fusion.tap{config.taps[i]}"
        g = nm.lrn_backward(a, g, lrn.depth, lrn.alpha, lrn.beta, lrn.k)
        g = nm.relu_backward(z, g)
        g = nm.conv2d_backward(s, params[name + ".conv"], g, 1, pad)
        kind, f = config.sampling(i)
        if kind == "pool":
            g = nm.maxpool2d_backward(g, aux, x.shape)
        elif kind == "deconv":
            _, stride, crop = _deconv_geometry(f)
            g = nm.deconv2d_backward(x, params[name + ".deconv"], g, stride, crop)
        tap_grads.append(g)
    return tap_grads


def init_backbone_params(config: BackboneConfig, init, dtype=np.float32):
    params = {}
    c_in = 3
    k = config.kernel
    for i, c_out in enumerate(config.channels):
        params[f"backbone.conv{i + 1}"] = nm.LayerParams(
            weight=init((c_out, c_in, k, k)).astype(dtype), bias=np.zeros(c_out, dtype))
        c_in = c_out
    return params


def init_fusion_params(config: FusionConfig, init, dtype=np.float32):
    params = {}
    k = config.kernel
    for i, t in enumerate(config.taps):
        name = f"fusion.tap{t}"
        c = config.tap_channels[i]
        kind, f = config.sampling(i)
        if kind == "deconv":
            size, _, _ = _deconv_geometry(f)
            params[name + ".deconv"] = nm.LayerParams(weight=nm.bilinear_deconv_weight(c, size, dtype))
        params[name + ".conv"] = nm.LayerParams(
            weight=init((config.out_channels[i], c, k, k)).astype(dtype),
            bias=np.zeros(config.out_channels[i], dtype))
    return params
