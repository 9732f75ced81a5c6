"""Layer primitives with explicit forward and backward passes.

Feature maps are plain numpy arrays, channel-first: ``(C, H, W)`` for one map
or ``(N, C, H, W)`` for a stack of them (e.g. pooled ROIs).  Every backward
function returns the input gradient and *accumulates* parameter gradients
into the ``LayerParams`` it was given; callers zero them between steps.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class LayerParams:
    """Named parameter arrays plus matching gradient accumulators."""

    def __init__(self, **params):
        self.params = {k: np.asarray(v) for k, v in params.items()}
        self.grads = {k: np.zeros_like(v) for k, v in self.params.items()}

    def __getitem__(self, name):
        return self.params[name]

    def __setitem__(self, name, value):
        value = np.asarray(value)
        if name in self.params and value.shape != self.params[name].shape:
            raise ValueError(f"shape mismatch for {name}: {value.shape} vs {self.params[name].shape}")
        self.params[name] = value
        self.grads[name] = np.zeros_like(value)

    def __contains__(self, name):
        return name in self.params

    def zero_grad(self):
        for g in self.grads.values():
            g.fill(0)

    def astype(self, dtype):
        return LayerParams(**{k: v.astype(dtype) for k, v in self.params.items()})

    def copy(self):
        return LayerParams(**{k: v.copy() for k, v in self.params.items()})


def _batched(x):
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ValueError(f"expected a (C,H,W) or (N,C,H,W) array, got shape {x.shape}")


def conv_output_size(size, kernel, stride, padding):
    return (size + 2 * padding - kernel) // stride + 1


def _im2col(xp, kh, kw, stride, oh, ow):
    # xp: (N, C, Hp, Wp) already padded -> (C*kh*kw, N*oh*ow)
    n, c = xp.shape[:2]
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, : stride * (oh - 1) + 1 : stride, : stride * (ow - 1) + 1 : stride]
    # (N, C, oh, ow, kh, kw) -> (C, kh, kw, N, oh, ow)
    return win.transpose(1, 4, 5, 0, 2, 3).reshape(c * kh * kw, n * oh * ow)


def _col2im(cols, shape, kh, kw, stride, oh, ow):
    n, c, hp, wp = shape
    out = np.zeros((c, n, hp, wp), dtype=cols.dtype)
    cols = cols.reshape(c, kh, kw, n, oh, ow)
    for dy in range(kh):
        for dx in range(kw):
            out[:, :, dy : dy + stride * (oh - 1) + 1 : stride,
                dx : dx + stride * (ow - 1) + 1 : stride] += cols[:, dy, dx]
    return out.transpose(1, 0, 2, 3)


def _correlate(x, w, stride, padding):
    """Raw batched cross-correlation, no bias. x: (N,C,H,W), w: (O,C,kh,kw)."""
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    oh = conv_output_size(h, kh, stride, padding)
    ow = conv_output_size(wd, kw, stride, padding)
    if oh < 1 or ow < 1:
        raise ValueError(f"kernel {kh}x{kw} larger than padded input {h + 2 * padding}x{wd + 2 * padding}")
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
    hp, wp = xp.shape[2:]
    if stride == 1 and o < c:
        # project first, then shift-add: one pass over the (larger) input
        xt = xp.transpose(1, 0, 2, 3).reshape(c, n * hp * wp)
        z = (w.transpose(0, 2, 3, 1).reshape(o * kh * kw, c) @ xt).reshape(o, kh, kw, n, hp, wp)
        out = np.zeros((o, n, oh, ow), dtype=z.dtype)
        for dy in range(kh):
            for dx in range(kw):
                out += z[:, dy, dx, :, dy : dy + oh, dx : dx + ow]
    else:
        cols = _im2col(xp, kh, kw, stride, oh, ow)
        out = (w.reshape(o, -1) @ cols).reshape(o, n, oh, ow)
    return out.transpose(1, 0, 2, 3)


def _correlate_grad_input(gy, w, stride, padding, in_hw):
    """Adjoint of ``_correlate`` with respect to its input."""
    n, o, oh, ow = gy.shape
    _, c, kh, kw = w.shape
    h, wd = in_hw
    hp, wp = h + 2 * padding, wd + 2 * padding
    gmat = gy.transpose(1, 0, 2, 3).reshape(o, n * oh * ow)
    cols = w.reshape(o, -1).T @ gmat
    gxp = _col2im(cols, (n, c, hp, wp), kh, kw, stride, oh, ow)
    if padding:
        gxp = gxp[:, :, padding : padding + h, padding : padding + wd]
    return np.ascontiguousarray(gxp)


def _correlate_grad_weight(x, gy, kernel_hw, stride, padding):
    n, o, oh, ow = gy.shape
    kh, kw = kernel_hw
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
    cols = _im2col(xp, kh, kw, stride, oh, ow)
    gmat = gy.transpose(1, 0, 2, 3).reshape(o, n * oh * ow)
    return (gmat @ cols.T).reshape(o, x.shape[1], kh, kw)


def conv2d_forward(x, params, stride=1, padding=0):
    """Cross-correlation (no kernel flip) plus per-channel bias.

    ``params['weight']`` is ``(out, in, kh, kw)``; ``params['bias']`` is ``(out,)``.
    """
    if stride < 1:
        raise ValueError("stride must be >= 1")
    w = params["weight"]
    xb, squeeze = _batched(x)
    if xb.shape[1] != w.shape[1]:
        raise ValueError(f"input has {xb.shape[1]} channels, kernel expects {w.shape[1]}")
    y = _correlate(xb, w, stride, padding)
    if "bias" in params:
        y += params["bias"][None, :, None, None]
    return y[0] if squeeze else y


def conv2d_backward(x, params, grad_output, stride=1, padding=0):
    w = params["weight"]
    xb, squeeze = _batched(x)
    gb, _ = _batched(grad_output)
    expected = (xb.shape[0], w.shape[0],
                conv_output_size(xb.shape[2], w.shape[2], stride, padding),
                conv_output_size(xb.shape[3], w.shape[3], stride, padding))
    if xb.shape[1] != w.shape[1] or gb.shape != expected:
        raise ValueError(f"grad_output shape {gb.shape} does not match forward output {expected}")
    params.grads["weight"] += _correlate_grad_weight(xb, gb, w.shape[2:], stride, padding)
    if "bias" in params:
        params.grads["bias"] += gb.sum(axis=(0, 2, 3))
    gx = _correlate_grad_input(gb, w, stride, padding, xb.shape[2:])
    return gx[0] if squeeze else gx


def deconv_output_size(size, kernel, stride, padding):
    return (size - 1) * stride + kernel - 2 * padding


def deconv2d_forward(x, params, stride=1, padding=0):
    """Transposed convolution; ``params['weight']`` is ``(in, out, kh, kw)``.

    Output extent is ``(H-1)*stride + kh - 2*padding``; ``padding`` crops the
    border so that e.g. a 4x4 kernel at stride 2 with padding 1 doubles H.
    """
    if stride < 1:
        raise ValueError("stride must be >= 1")
    w = params["weight"]
    xb, squeeze = _batched(x)
    if xb.shape[1] != w.shape[0]:
        raise ValueError(f"input has {xb.shape[1]} channels, kernel expects {w.shape[0]}")
    out_hw = (deconv_output_size(xb.shape[2], w.shape[2], stride, padding),
              deconv_output_size(xb.shape[3], w.shape[3], stride, padding))
    y = _correlate_grad_input(xb, w, stride, padding, out_hw)
    if "bias" in params:
        y += params["bias"][None, :, None, None]
    return y[0] if squeeze else y


def deconv2d_backward(x, params, grad_output, stride=1, padding=0):
    w = params["weight"]
    xb, squeeze = _batched(x)
    gb, _ = _batched(grad_output)
    expected = (xb.shape[0], w.shape[1],
                deconv_output_size(xb.shape[2], w.shape[2], stride, padding),
                deconv_output_size(xb.shape[3], w.shape[3], stride, padding))
    if xb.shape[1] != w.shape[0] or gb.shape != expected:
        raise ValueError(f"grad_output shape {gb.shape} does not match forward output {expected}")
    # the deconv input plays the role of a conv output gradient
    params.grads["weight"] += _correlate_grad_weight(gb, xb, w.shape[2:], stride, padding)
    if "bias" in params:
        params.grads["bias"] += gb.sum(axis=(0, 2, 3))
    gx = _correlate(gb, w, stride, padding)
    return gx[0] if squeeze else gx


def bilinear_kernel(size):
    """2-D bilinear interpolation kernel of side ``size`` (FCN-style upsampler)."""
    factor = (size + 1) // 2
    center = factor - 1 if size % 2 == 1 else factor - 0.5
    og = np.arange(size)
    filt = 1 - np.abs(og - center) / factor
    return np.outer(filt, filt)


def bilinear_deconv_weight(channels, size, dtype=np.float64):
    """Channel-wise bilinear upsampler: identity across channels, zero cross terms."""
    w = np.zeros((channels, channels, size, size), dtype=dtype)
    w[np.arange(channels), np.arange(channels)] = bilinear_kernel(size)
    return w


def maxpool2d_forward(x, window, stride, padding=0):
    """Max pooling. Returns ``(output, argmax)`` where argmax holds flat ``h*W + w``
    indices into each input channel; ties go to the lowest linear index."""
    xb, squeeze = _batched(x)
    n, c, h, w = xb.shape
    if padding:
        xp = np.pad(xb, ((0, 0), (0, 0), (padding, padding), (padding, padding)),
                    constant_values=-np.inf)
    else:
        xp = xb
    oh = conv_output_size(h, window, stride, padding)
    ow = conv_output_size(w, window, stride, padding)
    if oh < 1 or ow < 1:
        raise ValueError("pooling window larger than padded input")
    win = sliding_window_view(xp, (window, window), axis=(2, 3))
    win = win[:, :, : stride * (oh - 1) + 1 : stride, : stride * (ow - 1) + 1 : stride]
    win = win.reshape(n, c, oh, ow, window * window)
    local = win.argmax(axis=-1)
    out = np.take_along_axis(win, local[..., None], axis=-1)[..., 0]
    rows = np.arange(oh)[:, None] * stride + local // window - padding
    cols = np.arange(ow)[None, :] * stride + local % window - padding
    argmax = rows * w + cols
    if squeeze:
        return out[0], argmax[0]
    return out, argmax


def scatter_max_grad(grad_output, argmax, in_shape):
    """Route gradients back to the recorded argmax cells (summing collisions)."""
    gb, squeeze = _batched(grad_output) if grad_output.ndim in (3, 4) else (grad_output, False)
    n, c = gb.shape[:2]
    hw = in_shape[-2] * in_shape[-1]
    ab = argmax.reshape(n, c, -1)
    offset = (np.arange(n * c) * hw).reshape(n, c, 1)
    flat = np.bincount((ab + offset).ravel(), weights=gb.reshape(n, c, -1).ravel(),
                       minlength=n * c * hw)
    out = flat.reshape(n, c, in_shape[-2], in_shape[-1]).astype(grad_output.dtype, copy=False)
    return out[0] if squeeze else out


def maxpool2d_backward(grad_output, argmax, in_shape):
    return scatter_max_grad(grad_output, argmax, in_shape)


def _channel_window_sum(a, lo, hi, axis):
    """Sum over channel window ``[c - lo, c + hi]`` clamped to the channel range."""
    a = np.moveaxis(a, axis, 0)
    c = a.shape[0]
    cs = np.concatenate([np.zeros_like(a[:1]), np.cumsum(a, axis=0)], axis=0)
    idx = np.arange(c)
    start = np.clip(idx - lo, 0, c)
    stop = np.clip(idx + hi + 1, 0, c)
    return np.moveaxis(cs[stop] - cs[start], 0, axis)


def _lrn_offsets(depth):
    lo = (depth - 1) // 2
    return lo, depth - 1 - lo


def lrn_forward(x, depth=5, alpha=1e-4, beta=0.75, k=2.0):
    """Across-channel local response normalisation:

        b_c = a_c / (k + alpha/depth * sum_{c' in window(c)} a_c'^2) ** beta
    """
    if depth < 1 or k <= 0:
        raise ValueError("LRN needs depth >= 1 and k > 0")
    axis = x.ndim - 3
    lo, hi = _lrn_offsets(depth)
    scale = k + (alpha / depth) * _channel_window_sum(x * x, lo, hi, axis)
    return x * scale ** -beta


def lrn_backward(x, grad_output, depth=5, alpha=1e-4, beta=0.75, k=2.0):
    axis = x.ndim - 3
    lo, hi = _lrn_offsets(depth)
    scale = k + (alpha / depth) * _channel_window_sum(x * x, lo, hi, axis)
    inner = grad_output * x * scale ** (-beta - 1)
    # channel c' receives from every c whose window contains it: c in [c'-hi, c'+lo]
    spread = _channel_window_sum(inner, hi, lo, axis)
    return grad_output * scale ** -beta - (2 * alpha * beta / depth) * x * spread


def relu_forward(x):
    return np.maximum(x, 0)


def relu_backward(x, grad_output):
    return grad_output * (x > 0)


def fc_forward(x, params):
    """``x``: (N, D); ``params['weight']``: (out, D)."""
    w = params["weight"]
    if x.shape[-1] != w.shape[1]:
        raise ValueError(f"input width {x.shape[-1]} does not match weight {w.shape}")
    y = x @ w.T
    if "bias" in params:
        y = y + params["bias"]
    return y


def fc_backward(x, params, grad_output):
    params.grads["weight"] += grad_output.T @ x
    if "bias" in params:
        params.grads["bias"] += grad_output.sum(axis=0)
    return grad_output @ params["weight"]


def dropout_forward(x, rate, rng=None, training=True):
    """Inverted dropout. Returns ``(output, mask)``; the mask already carries the
    ``1/(1-rate)`` scale so inference needs no rescaling."""
    if not 0 <= rate < 1:
        raise ValueError("dropout rate must be in [0, 1)")
    if not training or rate == 0:
        return x, None
    if rng is None or isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(rng)
    mask = (rng.random(x.shape) >= rate).astype(x.dtype) / (1 - rate)
    return x * mask, mask


def dropout_backward(grad_output, mask):
    return grad_output if mask is None else grad_output * mask


def softmax(logits, axis=-1):
    z = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_cross_entropy(logits, labels):
    """Mean softmax loss over rows. Returns ``(loss, grad_logits)``."""
    logits = np.atleast_2d(logits)
    labels = np.atleast_1d(np.asarray(labels))
    n, k = logits.shape
    if labels.shape != (n,):
        raise ValueError("one label per row expected")
    if n and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"label out of range [0, {k})")
    z = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    loss = float(np.mean(logsum - z[rows, labels])) if n else 0.0
    grad = np.exp(z - logsum[:, None])
    grad[rows, labels] -= 1
    return loss, grad / max(n, 1)


def xavier_init(shape, seed=None):
    """Uniform on +-sqrt(6 / (fan_in + fan_out)); ``seed`` may be an int or a Generator."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    shape = tuple(int(s) for s in shape)
    receptive = int(np.prod(shape[2:])) if len(shape) > 2 else 1
    fan_out = shape[0] * receptive
    fan_in = (shape[1] if len(shape) > 1 else 1) * receptive
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)
