"""U-Net feature extractor.

A five-level encoder/decoder with skip connections. The network maps a
(B, H, W, in_channels) batch to per-pixel feature vectors (B, H, W, C),
preserving the spatial grid. Four 2x poolings mean H and W must be
divisible by 16; with instance normalization they must also be at least
32 so the bottleneck keeps more than one spatial element.

All parameters are initialized from an explicit torch.Generator so two
backbones built with the same config and seed are byte-identical.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .errors import ConfigError, ShapeError

PRESETS = {
    "low": (16, 32, 64, 128, 256),
    "high": (32, 64, 128, 256, 512),
}
NUM_LEVELS = 5
DOWNSAMPLE = 16  # 2 ** (NUM_LEVELS - 1)
NORM_KINDS = ("instance", "none")


@dataclass(frozen=True)
class BackboneConfig:
    """Architecture hyperparameters for the U-Net feature extractor.

    filters may be a preset name ("low", "high") or a sequence of exactly
    five non-decreasing positive widths, encoder level 0 to bottleneck.
    feature_channels is the width C of the output feature map and defaults
    to filters[0].
    """

    in_channels: int = 1
    filters: tuple[int, ...] | str = "low"
    feature_channels: int | None = None
    norm: str = "instance"

    def __post_init__(self):
        if isinstance(self.filters, str):
            if self.filters not in PRESETS:
                raise ConfigError(
                    f"unknown filter preset {self.filters!r}, expected one of {sorted(PRESETS)}"
                )
            object.__setattr__(self, "filters", PRESETS[self.filters])
        filters = tuple(int(f) for f in self.filters)
        if len(filters) != NUM_LEVELS:
            raise ConfigError(
                f"filters must list exactly {NUM_LEVELS} widths, got {len(filters)}"
            )
        if any(f < 1 for f in filters):
            raise ConfigError(f"filter widths must be >= 1, got {filters}")
        if any(a > b for a, b in zip(filters, filters[1:])):
            raise ConfigError(f"filter widths must be non-decreasing, got {filters}")
        object.__setattr__(self, "filters", filters)
        if self.in_channels < 1:
            raise ConfigError(f"in_channels must be >= 1, got {self.in_channels}")
        if self.norm not in NORM_KINDS:
            raise ConfigError(f"norm must be one of {NORM_KINDS}, got {self.norm!r}")
        if self.feature_channels is not None and self.feature_channels < 1:
            raise ConfigError(
                f"feature_channels must be >= 1, got {self.feature_channels}"
            )

    @property
    def resolved_feature_channels(self) -> int:
        if self.feature_channels is None:
            return self.filters[0]
        return int(self.feature_channels)


def _norm_layer(kind: str, channels: int) -> nn.Module:
    if kind == "instance":
        return nn.InstanceNorm2d(channels, affine=True)
    return nn.Identity()


class DoubleConv(nn.Sequential):
    """Two 3x3 convs, each followed by normalization and ReLU."""

    def __init__(self, in_ch: int, out_ch: int, norm: str):
        super().__init__(
            nn.Conv2d(in_ch, out_ch, 3, padding=1),
            _norm_layer(norm, out_ch),
            nn.ReLU(inplace=True),
            nn.Conv2d(out_ch, out_ch, 3, padding=1),
            _norm_layer(norm, out_ch),
            nn.ReLU(inplace=True),
        )


class UNetBackbone(nn.Module):
    """Encoder/decoder feature extractor; forward works on (B, C, H, W)."""

    def __init__(self, config: BackboneConfig):
        super().__init__()
        self.config = config
        f = config.filters
        ins = (config.in_channels,) + f[:-1]
        self.encoders = nn.ModuleList(
            DoubleConv(i, o, config.norm) for i, o in zip(ins, f)
        )
        self.pool = nn.MaxPool2d(2)
        # Upsampling path: nearest-neighbor resize then a 3x3 conv that
        # halves the channel count before the skip concatenation.
        self.up_convs = nn.ModuleList(
            nn.Conv2d(f[j + 1], f[j], 3, padding=1) for j in reversed(range(NUM_LEVELS - 1))
        )
        self.decoders = nn.ModuleList(
            DoubleConv(2 * f[j], f[j], config.norm) for j in reversed(range(NUM_LEVELS - 1))
        )
        self.project = nn.Conv2d(f[0], config.resolved_feature_channels, 1)

    @property
    def feature_channels(self) -> int:
        return self.config.resolved_feature_channels

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        skips = []
        for level, encoder in enumerate(self.encoders):
            if level > 0:
                x = self.pool(x)
            x = encoder(x)
            skips.append(x)
        for up, decoder, skip in zip(self.up_convs, self.decoders, reversed(skips[:-1])):
            x = nn.functional.interpolate(x, scale_factor=2, mode="nearest")
            x = up(x)
            x = decoder(torch.cat([skip, x], dim=1))
        return self.project(x)


def init_parameters_(module: nn.Module, generator: torch.Generator) -> None:
    """Deterministically initialize conv/linear/norm parameters in place.

    Weights are Kaiming-uniform over fan-in, biases zero, norm scales one.
    Iteration follows module registration order, so the draw sequence is a
    pure function of the architecture and the generator state.
    """
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            fan_in = m.weight[0].numel()
            bound = math.sqrt(6.0 / fan_in)
            m.weight.data.uniform_(-bound, bound, generator=generator)
            if m.bias is not None:
                m.bias.data.zero_()
        elif isinstance(m, nn.InstanceNorm2d) and m.affine:
            m.weight.data.fill_(1.0)
            m.bias.data.zero_()


def build_backbone(config: BackboneConfig, seed: int) -> UNetBackbone:
    """Construct a backbone whose parameters are a pure function of
    (config, seed)."""
    backbone = UNetBackbone(config)
    generator = torch.Generator().manual_seed(int(seed))
    init_parameters_(backbone, generator)
    return backbone


def _check_spatial(name: str, size: int, axis: int) -> None:
    if size % DOWNSAMPLE != 0:
        raise ShapeError(
            f"{name} (axis {axis}) must be divisible by {DOWNSAMPLE}, got {size}"
        )


def extract_features(backbone: UNetBackbone, images) -> torch.Tensor:
    """Run the backbone on a (B, H, W, in_channels) batch.

    Accepts numpy arrays or torch tensors and returns a (B, H, W, C)
    tensor on the backbone's device and dtype. Gradients flow through
    when called inside a grad-enabled context.
    """
    param = next(backbone.parameters())
    if isinstance(images, np.ndarray):
        images = torch.from_numpy(images)
    if not torch.is_tensor(images):
        raise ShapeError(f"images must be an array or tensor, got {type(images).__name__}")
    if images.dim() != 4:
        raise ShapeError(
            f"images must be (batch, height, width, channels), got {tuple(images.shape)}"
        )
    b, h, w, c = images.shape
    if c != backbone.config.in_channels:
        raise ShapeError(
            f"images channel axis (3) must have {backbone.config.in_channels} "
            f"channels, got {c}"
        )
    _check_spatial("height", h, 1)
    _check_spatial("width", w, 2)
    if backbone.config.norm == "instance":
        # the bottleneck map must keep more than one spatial element,
        # otherwise per-instance statistics are undefined
        for name, size, axis in (("height", h, 1), ("width", w, 2)):
            if size < 2 * DOWNSAMPLE:
                raise ShapeError(
                    f"{name} (axis {axis}) must be at least {2 * DOWNSAMPLE} with "
                    f"instance normalization, got {size}"
                )
    if not torch.isfinite(images).all():
        raise ShapeError("images contain non-finite values")
    x = images.to(device=param.device, dtype=param.dtype).permute(0, 3, 1, 2)
    return backbone(x).permute(0, 2, 3, 1)


def param_count(module: nn.Module) -> int:
    """Number of trainable scalar parameters."""
    return sum(p.numel() for p in module.parameters() if p.requires_grad)
