"""Coordinate-conditioned classifier heads.

Zero padding and pooling make feature statistics drift near image borders,
so a single linear classifier fit to interior statistics misreads border
pixels. The heads here condition the final per-pixel linear classifier on
the pixel's normalized border distances v = (top, right, bottom, left):

  baseline   s_v = w . x_v                      position-blind
  nerdm      s_v = w . (x_v * a(v) + b(v))      per-channel affine recalibration,
                                                a(v) plays 1/sigma, b(v) plays -mu/sigma
  nerdc      s_v = w(v) . x_v                   fully position-dependent weights

a, b and w(v) come from a small MLP over v, shared across pixels. Both
calibrated heads reduce exactly to the baseline (a=1, b=0, or w(v)=w), so
a freshly assembled calibrated model scores pixels identically to its
baseline twin.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .backbone import init_parameters_
from .coords import CHANNELS, PositionField
from .errors import ConfigError, ContractViolation, ShapeError

INPUT_DIM = len(CHANNELS)
DEFAULT_HIDDEN = (64, 64)
HEAD_KINDS = ("baseline", "nerdm", "nerdc")


class CalibratorMLP(nn.Module):
    """MLP from a 4-channel position vector to head parameters.

    Hidden layers use ReLU. When identity_bias is given the final layer is
    initialized to a constant function (zero weights, that bias), which is
    how the calibrated heads start out equal to the baseline head.
    """

    def __init__(
        self,
        output_dim: int,
        hidden: tuple[int, ...] = DEFAULT_HIDDEN,
        seed: int = 0,
        generator: torch.Generator | None = None,
        identity_bias: torch.Tensor | None = None,
    ):
        super().__init__()
        hidden = tuple(int(h) for h in hidden)
        if output_dim < 1:
            raise ConfigError(f"output_dim must be >= 1, got {output_dim}")
        if any(h < 1 for h in hidden):
            raise ConfigError(f"hidden widths must be >= 1, got {hidden}")
        self.output_dim = int(output_dim)
        self.hidden = hidden
        layers: list[nn.Module] = []
        widths = (INPUT_DIM,) + hidden
        for i, o in zip(widths, widths[1:]):
            layers += [nn.Linear(i, o), nn.ReLU(inplace=True)]
        layers.append(nn.Linear(widths[-1], output_dim))
        self.net = nn.Sequential(*layers)
        if generator is None:
            generator = torch.Generator().manual_seed(int(seed))
        init_parameters_(self, generator)
        if identity_bias is not None:
            identity_bias = torch.as_tensor(identity_bias, dtype=torch.float32)
            if identity_bias.shape != (output_dim,):
                raise ShapeError(
                    f"identity_bias must have shape ({output_dim},), got "
                    f"{tuple(identity_bias.shape)}"
                )
            final = self.net[-1]
            with torch.no_grad():
                final.weight.zero_()
                final.bias.copy_(identity_bias)

    def forward(self, coords: torch.Tensor) -> torch.Tensor:
        if coords.shape[-1] != INPUT_DIM:
            raise ShapeError(
                f"coords last axis must have {INPUT_DIM} channels, got {coords.shape[-1]}"
            )
        return self.net(coords)


def field_tensor(field: PositionField, like: torch.Tensor) -> torch.Tensor:
    """Position field values as a tensor matching another tensor's dtype/device."""
    if not field.normalized:
        raise ContractViolation("calibrators require a normalized position field")
    return torch.tensor(field.values, dtype=like.dtype, device=like.device)


@dataclass
class ScaleShift:
    """Per-pixel affine recalibration maps, each (H, W, C)."""

    inv_scale: torch.Tensor
    shift: torch.Tensor


SOFTPLUS_ONE = math.log(math.e - 1.0)  # softplus(SOFTPLUS_ONE) == 1


def identity_bias_m(channels: int, positive_scale: bool = False) -> torch.Tensor:
    """Final-layer bias that makes calibrate_m the identity map."""
    scale_part = torch.full((channels,), SOFTPLUS_ONE if positive_scale else 1.0)
    return torch.cat([scale_part, torch.zeros(channels)])


def calibrate_m(
    mlp: CalibratorMLP, field: PositionField, positive_scale: bool = False
) -> ScaleShift:
    """Evaluate the affine calibrator on every pixel of a grid.

    The MLP output is split into (inv_scale, shift) halves of C channels
    each. With positive_scale the scale half passes through softplus, which
    keeps the learned 1/sigma strictly positive.
    """
    if mlp.output_dim % 2 != 0:
        raise ConfigError(
            f"affine calibration needs an even output_dim, got {mlp.output_dim}"
        )
    coords = field_tensor(field, next(mlp.parameters()))
    out = mlp(coords)
    channels = mlp.output_dim // 2
    inv_scale, shift = out[..., :channels], out[..., channels:]
    if positive_scale:
        inv_scale = nn.functional.softplus(inv_scale)
    return ScaleShift(inv_scale=inv_scale, shift=shift)


def calibrate_c(mlp: CalibratorMLP, field: PositionField) -> torch.Tensor:
    """Evaluate the weight-field calibrator; returns (H, W, C) weights."""
    coords = field_tensor(field, next(mlp.parameters()))
    return mlp(coords)


def _check_features(features: torch.Tensor, channels: int, spatial: tuple[int, int]) -> None:
    if features.dim() not in (3, 4):
        raise ShapeError(
            f"features must be (H, W, C) or (B, H, W, C), got {tuple(features.shape)}"
        )
    if features.shape[-1] != channels:
        raise ShapeError(
            f"features channel axis must have {channels} channels, got {features.shape[-1]}"
        )
    if tuple(features.shape[-3:-1]) != spatial:
        raise ShapeError(
            f"features spatial axes {tuple(features.shape[-3:-1])} do not match "
            f"the calibration grid {spatial}"
        )


def baseline_logits(features: torch.Tensor, weight: torch.Tensor) -> torch.Tensor:
    """Position-blind head: dot every pixel's feature vector with weight."""
    if features.shape[-1] != weight.shape[-1]:
        raise ShapeError(
            f"features channel axis ({features.shape[-1]}) does not match "
            f"weight length ({weight.shape[-1]})"
        )
    return (features * weight).sum(-1)


def nerdm_logits(
    features: torch.Tensor, calibration: ScaleShift, weight: torch.Tensor
) -> torch.Tensor:
    """Affine-recalibrated head: whiten features per pixel, then dot with weight."""
    spatial = tuple(calibration.inv_scale.shape[:2])
    _check_features(features, calibration.inv_scale.shape[-1], spatial)
    calibrated = features * calibration.inv_scale + calibration.shift
    return (calibrated * weight).sum(-1)


def nerdc_logits(features: torch.Tensor, weight_field: torch.Tensor) -> torch.Tensor:
    """Position-dependent head: dot each pixel with its own weight vector."""
    _check_features(features, weight_field.shape[-1], tuple(weight_field.shape[:2]))
    return (features * weight_field).sum(-1)


def segment(logits, threshold: float = 0.5) -> np.ndarray:
    """Threshold sigmoid scores into a boolean mask.

    A pixel is foreground when sigmoid(logit) >= threshold. Accepts torch
    tensors or numpy arrays; always returns a numpy bool array.
    """
    threshold = float(threshold)
    if not 0.0 < threshold < 1.0:
        raise ConfigError(f"threshold must lie strictly inside (0, 1), got {threshold}")
    if torch.is_tensor(logits):
        logits = logits.detach().cpu().numpy()
    logits = np.asarray(logits, dtype=np.float64)
    # sigmoid(s) >= t  <=>  s >= logit(t); avoids overflow for extreme scores
    cut = math.log(threshold / (1.0 - threshold))
    return logits >= cut
