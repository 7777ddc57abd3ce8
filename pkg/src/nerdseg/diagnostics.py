"""Feature-distribution diagnostics.

Quantifies how much backbone feature statistics drift near image borders:
accumulate per-pixel mean/std maps over a dataset, then compare a border
ring against the interior. A large shift score on the default band is the
signature of padding-induced distribution shift; the same score on an
interior ring of equal width serves as the control.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import matplotlib
import numpy as np
import torch
from PIL import Image

from .backbone import UNetBackbone, extract_features
from .data import SliceSample
from .errors import ConfigError, ShapeError
from .validation import check_positive_int

EPS = 1e-8
DEFAULT_BAND = 8


@dataclass
class SpatialStats:
    """Per-pixel feature statistics over a dataset; maps are (H, W, C)."""

    mean: np.ndarray
    std: np.ndarray
    count: int


Moments = tuple[int, np.ndarray, np.ndarray]  # (count, mean, M2)


def merge_moments(a: Moments, b: Moments) -> Moments:
    """Combine two partial (count, mean, M2) accumulators exactly."""
    n_a, mean_a, m2_a = a
    n_b, mean_b, m2_b = b
    if n_a == 0:
        return b
    if n_b == 0:
        return a
    n = n_a + n_b
    delta = mean_b - mean_a
    mean = mean_a + delta * (n_b / n)
    m2 = m2_a + m2_b + delta**2 * (n_a * n_b / n)
    return n, mean, m2


def _resolve_backbone(model) -> UNetBackbone:
    if isinstance(model, UNetBackbone):
        return model
    backbone = getattr(model, "backbone", None)
    if isinstance(backbone, UNetBackbone):
        return backbone
    raise ConfigError(f"cannot extract features from {type(model).__name__}")


def feature_stats(model, images, batch_size: int = 8) -> SpatialStats:
    """Accumulate per-pixel feature mean/std over a dataset.

    images is a (N, H, W, in_channels) array (N >= 2) or a sequence of
    SliceSample records with equal-sized images. Accumulation is streaming,
    one batch at a time, with exact moment merging.
    """
    backbone = _resolve_backbone(model)
    check_positive_int("batch_size", batch_size)
    if isinstance(images, Sequence) and images and isinstance(images[0], SliceSample):
        stack = []
        first = None
        for i, s in enumerate(images):
            image = np.asarray(s.image, dtype=np.float32)
            if image.ndim == 2:
                image = image[..., None]
            if first is None:
                first = image.shape
            elif image.shape != first:
                raise ShapeError(
                    f"sample {i} image shape {image.shape} differs from {first}"
                )
            stack.append(image)
        images = np.stack(stack)
    if torch.is_tensor(images):
        images = images.detach().cpu().numpy()
    images = np.asarray(images, dtype=np.float32)
    if images.ndim != 4:
        raise ShapeError(f"images must be (N, H, W, C), got {images.shape}")
    n = images.shape[0]
    if n < 2:
        raise ConfigError(f"need at least 2 samples for spread estimates, got {n}")
    total: Moments = (0, np.zeros(1), np.zeros(1))
    was_training = backbone.training
    backbone.eval()
    try:
        with torch.no_grad():
            for start in range(0, n, batch_size):
                feats = extract_features(backbone, images[start : start + batch_size])
                feats = feats.double().numpy()
                count = feats.shape[0]
                mean = feats.mean(axis=0)
                m2 = ((feats - mean) ** 2).sum(axis=0)
                total = merge_moments(total, (count, mean, m2))
    finally:
        backbone.train(was_training)
    count, mean, m2 = total
    return SpatialStats(mean=mean, std=np.sqrt(m2 / count), count=count)


def _depth_map(height: int, width: int) -> np.ndarray:
    rows = np.arange(height)[:, None]
    cols = np.arange(width)[None, :]
    return np.minimum(np.minimum(rows, height - 1 - rows),
                      np.minimum(cols, width - 1 - cols))


def shift_score(stats: SpatialStats, band: int = DEFAULT_BAND, offset: int = 0) -> float:
    """Standardized mean shift between a border ring and the interior.

    The ring holds pixels at border depth [offset, offset + band); the
    interior is everything deeper. Per channel, the absolute difference of
    region means is divided by the pooled per-pixel std (plus 1e-8); the
    score is the channel average. offset > 0 slides the ring inward, which
    gives a same-width control region away from the border.
    """
    check_positive_int("band", band)
    if offset < 0:
        raise ConfigError(f"offset must be >= 0, got {offset}")
    height, width, _ = stats.mean.shape
    if min(height, width) <= 2 * (offset + band):
        raise ConfigError(
            f"band {band} at offset {offset} leaves no interior in a "
            f"{height}x{width} map"
        )
    depth = _depth_map(height, width)
    ring = (depth >= offset) & (depth < offset + band)
    interior = depth >= offset + band
    region = depth >= offset
    mean_ring = stats.mean[ring].mean(axis=0)
    mean_interior = stats.mean[interior].mean(axis=0)
    pooled = np.sqrt((stats.std[region] ** 2).mean(axis=0))
    return float(np.mean(np.abs(mean_ring - mean_interior) / (pooled + EPS)))


def save_stats(path, stats: SpatialStats) -> None:
    np.savez(path, mean=stats.mean, std=stats.std, count=stats.count)


def load_stats(path) -> SpatialStats:
    with np.load(path) as npz:
        return SpatialStats(mean=npz["mean"], std=npz["std"], count=int(npz["count"]))


def _to_png(values: np.ndarray, path: Path, colormap: str) -> tuple[float, float]:
    lo, hi = float(values.min()), float(values.max())
    normed = np.zeros_like(values) if hi == lo else (values - lo) / (hi - lo)
    rgb = (matplotlib.colormaps[colormap](normed)[..., :3] * 255).astype(np.uint8)
    Image.fromarray(rgb).save(path)
    return lo, hi


def export_heatmaps(stats: SpatialStats, out_dir, colormap: str = "viridis",
                    prefix: str = "feature") -> list[Path]:
    """Render per-channel mean/std maps as PNGs with a JSON scale sidecar."""
    if colormap not in matplotlib.colormaps:
        raise ConfigError(f"unknown colormap {colormap!r}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    channels = stats.mean.shape[-1]
    written: list[Path] = []
    index = []
    for kind, maps in (("mean", stats.mean), ("std", stats.std)):
        for c in range(channels):
            path = out_dir / f"{prefix}_{kind}_c{c:02d}.png"
            lo, hi = _to_png(maps[..., c], path, colormap)
            written.append(path)
            index.append({"file": path.name, "kind": kind, "channel": c,
                          "min": lo, "max": hi})
    sidecar = out_dir / f"{prefix}_heatmaps.json"
    with open(sidecar, "w") as fh:
        json.dump({"count": stats.count, "colormap": colormap,
                   "channels": channels, "maps": index}, fh, indent=2, sort_keys=True)
        fh.write("\n")
    written.append(sidecar)
    return written
