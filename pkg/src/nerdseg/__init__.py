"""Border-aware binary segmentation.

Zero padding and pooling leave a positional fingerprint in convolutional
features: their statistics drift near image borders, and a classifier fit
to interior statistics misfires there. This package trains U-Net models
whose final per-pixel classifier is conditioned on each pixel's distances
to the image borders, measures the drift, and evaluates the segmentations
with voxel, lesion-wise, and surface metrics.
"""
from .backbone import BackboneConfig, UNetBackbone, build_backbone, extract_features, param_count
from .coords import PositionField, cached_position_field, normalize_positions, position_field
from .data import (
    Blob,
    SliceSample,
    SynthConfig,
    SynthDataset,
    Volume,
    center_crop,
    concat_modalities,
    generate_border_bias,
    load_dataset,
    normalize_intensity,
    rasterize_blobs,
    restack_slices,
    save_dataset,
    save_synth_dataset,
    slice_volume,
)
from .diagnostics import SpatialStats, export_heatmaps, feature_stats, shift_score
from .errors import (
    ConfigError,
    ContractViolation,
    EmptyMaskError,
    GenerationError,
    ShapeError,
)
from .estimator import NerdSegmenter
from .heads import (
    CalibratorMLP,
    ScaleShift,
    baseline_logits,
    calibrate_c,
    calibrate_m,
    nerdc_logits,
    nerdm_logits,
    segment,
)
from .metrics import (
    LesionCounts,
    LesionMetrics,
    LesionSet,
    SurfaceDistances,
    asd,
    connected_components,
    dice,
    evaluate_masks,
    hd,
    hd95,
    jaccard,
    lesion_counts,
    lesion_metrics,
    surface_distances,
)
from .model import ModelConfig, SegmentationModel, load_checkpoint, save_checkpoint
from .train import TrainConfig, lr_at, segmentation_loss, train_model
from .volume_io import read_volume, write_volume

__version__ = "0.1.0"

__all__ = [
    "BackboneConfig", "UNetBackbone", "build_backbone", "extract_features", "param_count",
    "PositionField", "position_field", "normalize_positions", "cached_position_field",
    "Volume", "SliceSample", "SynthConfig", "SynthDataset", "Blob",
    "slice_volume", "restack_slices", "center_crop", "normalize_intensity",
    "concat_modalities", "generate_border_bias", "rasterize_blobs",
    "save_dataset", "save_synth_dataset", "load_dataset",
    "SpatialStats", "feature_stats", "shift_score", "export_heatmaps",
    "ConfigError", "ContractViolation", "EmptyMaskError", "GenerationError", "ShapeError",
    "NerdSegmenter",
    "CalibratorMLP", "ScaleShift", "calibrate_m", "calibrate_c",
    "baseline_logits", "nerdm_logits", "nerdc_logits", "segment",
    "LesionSet", "LesionCounts", "LesionMetrics", "SurfaceDistances",
    "connected_components", "lesion_counts", "lesion_metrics",
    "dice", "jaccard", "surface_distances", "hd", "hd95", "asd", "evaluate_masks",
    "ModelConfig", "SegmentationModel", "save_checkpoint", "load_checkpoint",
    "TrainConfig", "lr_at", "segmentation_loss", "train_model",
    "read_volume", "write_volume",
]
