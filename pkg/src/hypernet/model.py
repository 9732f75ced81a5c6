"""The HyperNet model: parameters plus the end-to-end inference path."""
from __future__ import annotations

import numpy as np

from . import numerics as nm
from .backbone import (backbone_backward, backbone_forward, hyper_feature,
                       hyper_feature_backward, init_backbone_params, init_fusion_params)
from .config import HyperNetConfig
from .geometry import generate_candidates
from .heads import (detect, detection_spec, init_head_params, propose, proposal_spec)

HYPER_PREFIXES = ("backbone.", "fusion.")


def normalize_image(image):
    """Centre ``[0, 1]`` pixel values around zero."""
    return np.asarray(image) - 0.5


class HyperNetModel:
    """Parameter set and architecture for one HyperNet (basic or SP variant).

    ``params`` maps layer names (``backbone.conv1``, ``fusion.tap5.deconv``,
    ``proposal.fc1``, ``detection.cls`` ...) to :class:`LayerParams`.
    """

    def __init__(self, config: HyperNetConfig, params, dtype=np.float32):
        self.config = config
        self.params = params
        self.dtype = np.dtype(dtype)
        self._candidates = {}

    @classmethod
    def initialize(cls, config: HyperNetConfig, seed=0, dtype=np.float32):
        rng = np.random.default_rng(seed)
        init = lambda shape: nm.xavier_init(shape, rng)
        params = {}
        params.update(init_backbone_params(config.backbone, init, dtype))
        params.update(init_fusion_params(config.fusion, init, dtype))
        c = config.fusion.total_channels
        params.update(init_head_params(proposal_spec(config.proposal, c), init, dtype))
        params.update(init_head_params(detection_spec(config.detection, c), init, dtype))
        return cls(config, params, dtype)

    @property
    def feature_stride(self):
        return self.config.fusion.reference_stride

    @property
    def proposal_spec(self):
        return proposal_spec(self.config.proposal, self.config.fusion.total_channels)

    @property
    def detection_spec(self):
        return detection_spec(self.config.detection, self.config.fusion.total_channels)

    def layer_names(self, prefixes):
        return [n for n in self.params if n.startswith(tuple(prefixes))]

    def zero_grad(self):
        for lp in self.params.values():
            lp.zero_grad()

    def copy(self):
        return HyperNetModel(self.config, {k: v.copy() for k, v in self.params.items()}, self.dtype)

    def astype(self, dtype):
        return HyperNetModel(self.config, {k: v.astype(dtype) for k, v in self.params.items()}, dtype)

    def with_variant(self, variant):
        """Same weights under the other head arrangement (parameter shapes coincide)."""
        return HyperNetModel(self.config.with_variant(variant), self.params, self.dtype)

    def state_dict(self):
        return {f"{layer}.{name}": arr for layer, lp in self.params.items() for name, arr in lp.params.items()}

    def load_state_dict(self, state):
        for layer, lp in self.params.items():
            for name in lp.params:
                lp[name] = np.asarray(state[f"{layer}.{name}"], dtype=self.dtype)

    def assign_layers(self, other, prefixes):
        """Copy every layer under ``prefixes`` from ``other``."""
        for name in other.layer_names(prefixes):
            self.params[name] = other.params[name].copy()

    # -- forward / backward ------------------------------------------------
    def hyper_forward(self, image):
        """Hyper Feature for a ``(3, H, W)`` image in ``[0, 1]``; returns ``(hyper, cache)``."""
        x = normalize_image(image).astype(self.dtype, copy=False)
        taps, bcache = backbone_forward(x, self.params, self.config.backbone)
        hyper, fcache = hyper_feature(taps, self.params, self.config.fusion)
        return hyper, (bcache, fcache)

    def hyper_backward(self, cache, grad):
        bcache, fcache = cache
        tap_grads = hyper_feature_backward(fcache, grad, self.params, self.config.fusion)
        return backbone_backward(bcache, tap_grads, self.params, self.config.backbone)

    def hyper(self, image):
        return self.hyper_forward(image)[0]

    def candidates(self, image_hw):
        """Dense candidate boxes for an image of extent ``image_hw`` (cached)."""
        key = tuple(int(v) for v in image_hw)
        if key not in self._candidates:
            s = self.feature_stride
            h, w = key
            self._candidates[key] = generate_candidates(
                h // s, w // s, s, self.config.anchor_scales, self.config.anchor_ratios,
                image_bounds=(0, 0, w, h))
        return self._candidates[key]

    def propose(self, image=None, hyper=None, mode="test", top_k=None, image_hw=None):
        if hyper is None:
            hyper = self.hyper(image)
        h, w = image_hw or image.shape[-2:]
        return propose(hyper, self.candidates((h, w)), self.params, self.config.proposal,
                       self.feature_stride, (0, 0, w, h), mode=mode, top_k=top_k)

    def detect(self, image=None, proposals=None, hyper=None, image_hw=None):
        if hyper is None:
            hyper = self.hyper(image)
        h, w = image_hw or image.shape[-2:]
        if proposals is None:
            proposals, _ = self.propose(hyper=hyper, image_hw=(h, w))
        return detect(hyper, proposals, self.params, self.config.detection, self.feature_stride, (0, 0, w, h))
