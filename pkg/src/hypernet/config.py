"""Architecture configuration for the backbone, fusion and both heads."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np


@dataclass(frozen=True)
class BackboneConfig:
    """Plain 3x3 conv + ReLU stages.  ``taps`` are 1-based stage indices."""

    channels: Tuple[int, ...] = (16, 16, 32, 32, 64)
    strides: Tuple[int, ...] = (2, 2, 1, 2, 1)
    kernel: int = 3
    taps: Tuple[int, ...] = (1, 3, 5)
    reference_stride: int = 4

    def __post_init__(self):
        if len(self.channels) != len(self.strides):
            raise ValueError("one stride per stage required")
        for s in self.tap_strides:
            if s & (s - 1):
                raise ValueError(f"tap stride {s} is not a power of two")

    @property
    def cumulative_strides(self):
        return tuple(int(s) for s in np.cumprod(self.strides))

    @property
    def tap_strides(self):
        cum = self.cumulative_strides
        return tuple(cum[t - 1] for t in self.taps)

    @property
    def tap_channels(self):
        return tuple(self.channels[t - 1] for t in self.taps)

    @property
    def max_stride(self):
        return max(self.cumulative_strides)


@dataclass(frozen=True)
class LRNConfig:
    depth: int = 5
    alpha: float = 1e-4
    beta: float = 0.75
    k: float = 2.0


@dataclass(frozen=True)
class FusionConfig:
    """How each tap is brought to the reference resolution and compressed."""

    taps: Tuple[int, ...] = (1, 3, 5)
    tap_channels: Tuple[int, ...] = (16, 32, 64)
    tap_strides: Tuple[int, ...] = (2, 4, 8)
    reference_stride: int = 4
    out_channels: Tuple[int, ...] = (42, 42, 42)
    kernel: int = 3
    lrn: LRNConfig = field(default_factory=LRNConfig)

    def __post_init__(self):
        n = len(self.taps)
        if not (len(self.tap_channels) == len(self.tap_strides) == len(self.out_channels) == n) or n == 0:
            raise ValueError("per-tap fields must have one entry per tap")

    @property
    def total_channels(self):
        return int(sum(self.out_channels))

    def sampling(self, i):
        """``('pool' | 'deconv' | 'identity', factor)`` for tap ``i``."""
        s = self.tap_strides[i]
        if s < self.reference_stride:
            return "pool", self.reference_stride // s
        if s > self.reference_stride:
            return "deconv", s // self.reference_stride
        return "identity", 1


def ablation_select(taps_subset, backbone: Optional[BackboneConfig] = None, width=42, lrn=None):
    """Fusion over any subset of backbone stages (single-stage configs included)."""
    backbone = backbone or BackboneConfig()
    taps = tuple(sorted(set(int(t) for t in taps_subset)))
    if not taps:
        raise ValueError("at least one tap required")
    cum = backbone.cumulative_strides
    for t in taps:
        if not 1 <= t <= len(backbone.channels):
            raise ValueError(f"stage {t} does not exist")
    return FusionConfig(
        taps=taps,
        tap_channels=tuple(backbone.channels[t - 1] for t in taps),
        tap_strides=tuple(cum[t - 1] for t in taps),
        reference_stride=backbone.reference_stride,
        out_channels=(width,) * len(taps),
        lrn=lrn or LRNConfig(),
    )


@dataclass(frozen=True)
class ProposalHeadConfig:
    variant: str = "basic"
    bins: Tuple[int, int] = (13, 13)
    conv_channels: int = 4
    conv_kernel: int = 3
    fc_width: int = 256
    nms_threshold: float = 0.7
    top_k_train: int = 200
    top_k_test: int = 100
    min_size: float = 1.0

    def __post_init__(self):
        if self.variant not in ("basic", "sp"):
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.fc_width < 1:
            raise ValueError("fc_width must be >= 1")


@dataclass(frozen=True)
class DetectionHeadConfig:
    variant: str = "basic"
    bins: Tuple[int, int] = (13, 13)
    conv_channels: int = 63
    conv_kernel: int = 3
    fc_widths: Tuple[int, ...] = (256, 256)
    dropout: float = 0.25
    num_classes: int = 3
    score_floor: float = 0.05
    class_nms_threshold: float = 0.3
    max_detections: int = 100

    def __post_init__(self):
        if self.variant not in ("basic", "sp"):
            raise ValueError(f"unknown variant {self.variant!r}")


@dataclass(frozen=True)
class HyperNetConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    proposal: ProposalHeadConfig = field(default_factory=ProposalHeadConfig)
    detection: DetectionHeadConfig = field(default_factory=DetectionHeadConfig)
    anchor_scales: Tuple[float, ...] = (12.0, 24.0, 48.0)
    anchor_ratios: Tuple[float, ...] = (0.5, 1.0, 2.0)
    short_side: int = 128

    @property
    def variant(self):
        return self.proposal.variant

    def with_variant(self, variant):
        return dataclasses.replace(
            self,
            proposal=dataclasses.replace(self.proposal, variant=variant),
            detection=dataclasses.replace(self.detection, variant=variant),
        )

    def with_taps(self, taps):
        backbone = dataclasses.replace(self.backbone, taps=tuple(sorted(taps)))
        return dataclasses.replace(self, backbone=backbone, fusion=ablation_select(taps, backbone))

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        fusion = dict(d["fusion"])
        fusion["lrn"] = LRNConfig(**fusion["lrn"])
        return cls(
            backbone=BackboneConfig(**_tuples(d["backbone"])),
            fusion=FusionConfig(**_tuples(fusion)),
            proposal=ProposalHeadConfig(**_tuples(d["proposal"])),
            detection=DetectionHeadConfig(**_tuples(d["detection"])),
            anchor_scales=tuple(d["anchor_scales"]),
            anchor_ratios=tuple(d["anchor_ratios"]),
            short_side=d["short_side"],
        )


def _tuples(d):
    return {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}


def desk_config(num_classes=3, variant="basic"):
    """Desk-scale defaults: 128 px images, 3 scales x 3 ratios."""
    cfg = HyperNetConfig(detection=DetectionHeadConfig(num_classes=num_classes))
    return cfg.with_variant(variant)


def full_scale_config(num_classes=20, variant="basic"):
    """Short side 600 and 5 scales x 3 ratios; same layer widths as the desk backbone."""
    cfg = HyperNetConfig(
        detection=DetectionHeadConfig(num_classes=num_classes),
        anchor_scales=(32.0, 64.0, 128.0, 256.0, 512.0),
        short_side=600,
    )
    return cfg.with_variant(variant)
