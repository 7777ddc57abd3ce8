"""Model assembly and checkpoint container.

A SegmentationModel couples the U-Net feature extractor with one of the
three classifier heads. Construction is a pure function of (config, seed):
the backbone and the shared classifier weight draw from one generator
stream, so the three head variants built from the same seed start from the
same backbone and, through the identity initialization of the calibrators,
produce identical logits before training.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .backbone import (
    BackboneConfig,
    UNetBackbone,
    extract_features,
    init_parameters_,
    param_count,
)
from .coords import cached_position_field
from .errors import ConfigError, ShapeError
from .validation import take_keys
from .heads import (
    DEFAULT_HIDDEN,
    HEAD_KINDS,
    CalibratorMLP,
    baseline_logits,
    calibrate_c,
    calibrate_m,
    identity_bias_m,
    nerdc_logits,
    nerdm_logits,
    segment,
)

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    head: str = "nerdc"
    calibrator_hidden: tuple[int, ...] = DEFAULT_HIDDEN
    positive_scale: bool = False
    final_hidden: tuple[int, ...] = ()

    def __post_init__(self):
        if self.head not in HEAD_KINDS:
            raise ConfigError(f"head must be one of {HEAD_KINDS}, got {self.head!r}")
        object.__setattr__(
            self, "calibrator_hidden", tuple(int(h) for h in self.calibrator_hidden)
        )
        object.__setattr__(
            self, "final_hidden", tuple(int(h) for h in self.final_hidden)
        )
        if self.final_hidden and self.head == "nerdc":
            raise ConfigError(
                "final_hidden applies to the baseline and nerdm heads; the nerdc "
                "head's per-pixel weights already form the final classifier"
            )


def model_config_to_dict(config: ModelConfig) -> dict:
    return {
        "backbone": {
            "in_channels": config.backbone.in_channels,
            "filters": list(config.backbone.filters),
            "feature_channels": config.backbone.feature_channels,
            "norm": config.backbone.norm,
        },
        "head": config.head,
        "calibrator_hidden": list(config.calibrator_hidden),
        "positive_scale": config.positive_scale,
        "final_hidden": list(config.final_hidden),
    }


def model_config_from_dict(d: dict) -> ModelConfig:
    defaults = {
        "backbone": {},
        "head": "nerdc",
        "calibrator_hidden": list(DEFAULT_HIDDEN),
        "positive_scale": False,
        "final_hidden": [],
    }
    d = take_keys(d, defaults, "model config")
    bdefaults = {
        "in_channels": 1,
        "filters": "low",
        "feature_channels": None,
        "norm": "instance",
    }
    b = take_keys(dict(d["backbone"]), bdefaults, "backbone config")
    filters = b["filters"]
    if not isinstance(filters, str):
        filters = tuple(filters)
    backbone = BackboneConfig(
        in_channels=int(b["in_channels"]),
        filters=filters,
        feature_channels=None if b["feature_channels"] is None else int(b["feature_channels"]),
        norm=b["norm"],
    )
    return ModelConfig(
        backbone=backbone,
        head=d["head"],
        calibrator_hidden=tuple(d["calibrator_hidden"]),
        positive_scale=bool(d["positive_scale"]),
        final_hidden=tuple(d["final_hidden"]),
    )


class SegmentationModel(nn.Module):
    """Backbone plus classifier head; forward maps (B, H, W, in) to (B, H, W)."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        super().__init__()
        self.config = config
        self.seed = int(seed)
        generator = torch.Generator().manual_seed(self.seed)
        self.backbone = UNetBackbone(config.backbone)
        init_parameters_(self.backbone, generator)
        channels = self.backbone.feature_channels
        # The shared classifier weight is drawn before any calibrator
        # parameters so every head kind sees the same w for a given seed.
        bound = math.sqrt(6.0 / channels)
        w0 = torch.empty(channels).uniform_(-bound, bound, generator=generator)
        self.calibrator: CalibratorMLP | None = None
        self.classifier: nn.Sequential | None = None
        uses_weight = not config.final_hidden and config.head in ("baseline", "nerdm")
        if uses_weight:
            self.weight = nn.Parameter(w0.clone())
        if config.head == "nerdm":
            self.calibrator = CalibratorMLP(
                2 * channels,
                hidden=config.calibrator_hidden,
                generator=generator,
                identity_bias=identity_bias_m(channels, config.positive_scale),
            )
        elif config.head == "nerdc":
            self.calibrator = CalibratorMLP(
                channels,
                hidden=config.calibrator_hidden,
                generator=generator,
                identity_bias=w0,
            )
        if config.final_hidden:
            widths = (channels,) + config.final_hidden
            layers: list[nn.Module] = []
            for i, o in zip(widths, widths[1:]):
                layers += [nn.Linear(i, o), nn.ReLU(inplace=True)]
            layers.append(nn.Linear(widths[-1], 1, bias=False))
            self.classifier = nn.Sequential(*layers)
            init_parameters_(self.classifier, generator)

    @property
    def head(self) -> str:
        return self.config.head

    def forward(self, images) -> torch.Tensor:
        features = extract_features(self.backbone, images)
        h, w = features.shape[-3], features.shape[-2]
        field = cached_position_field(h, w)
        if self.config.head == "nerdm":
            calibration = calibrate_m(self.calibrator, field, self.config.positive_scale)
            if self.classifier is not None:
                calibrated = features * calibration.inv_scale + calibration.shift
                return self.classifier(calibrated).squeeze(-1)
            return nerdm_logits(features, calibration, self.weight)
        if self.config.head == "nerdc":
            return nerdc_logits(features, calibrate_c(self.calibrator, field))
        if self.classifier is not None:
            return self.classifier(features).squeeze(-1)
        return baseline_logits(features, self.weight)

    @torch.no_grad()
    def predict_mask(self, images, threshold: float = 0.5, batch_size: int = 16) -> np.ndarray:
        """Segment a (B, H, W, in) batch into a (B, H, W) boolean mask."""
        was_training = self.training
        self.eval()
        try:
            if isinstance(images, np.ndarray):
                images = torch.from_numpy(np.ascontiguousarray(images))
            masks = []
            for start in range(0, images.shape[0], batch_size):
                logits = self.forward(images[start : start + batch_size])
                masks.append(segment(logits, threshold))
            return np.concatenate(masks, axis=0)
        finally:
            self.train(was_training)

    def calibrator_param_count(self) -> int:
        """Trainable parameters added on top of the backbone and w."""
        return 0 if self.calibrator is None else param_count(self.calibrator)


def save_checkpoint(path, model: SegmentationModel, extra: dict | None = None) -> None:
    """Write a self-describing checkpoint; extra must be JSON-like."""
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "head": model.config.head,
        "model_config": model_config_to_dict(model.config),
        "seed": model.seed,
        "state_dict": model.state_dict(),
        "extra": dict(extra or {}),
    }
    torch.save(payload, path)


def load_checkpoint(path) -> tuple[SegmentationModel, dict]:
    """Rebuild a model from a checkpoint; returns (model, extra).

    Rejects payloads with a missing or unsupported format_version and head
    tags that do not name a known head kind.
    """
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except FileNotFoundError:
        raise
    except Exception as exc:
        raise ConfigError(f"unreadable checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or "format_version" not in payload:
        raise ConfigError(f"checkpoint {path} has no format_version field")
    version = payload["format_version"]
    if version != CHECKPOINT_VERSION:
        raise ConfigError(
            f"unsupported checkpoint format_version {version!r}, expected {CHECKPOINT_VERSION}"
        )
    head = payload.get("head")
    if head not in HEAD_KINDS:
        raise ConfigError(f"checkpoint head tag {head!r} is not one of {HEAD_KINDS}")
    config = model_config_from_dict(payload["model_config"])
    if config.head != head:
        raise ConfigError(
            f"checkpoint head tag {head!r} contradicts model config head {config.head!r}"
        )
    model = SegmentationModel(config, seed=int(payload.get("seed", 0)))
    try:
        model.load_state_dict(payload["state_dict"])
    except RuntimeError as exc:
        raise ConfigError(f"checkpoint state does not fit its declared config: {exc}") from exc
    return model, payload.get("extra", {})
