"""Scikit-learn style front end.

NerdSegmenter wraps model assembly and the training loop behind the usual
fit / predict / score surface, so the heads can be swapped, cloned, and
grid-searched like any other estimator. X is a batch of image planes
(N, H, W) or (N, H, W, C); y is the matching stack of binary masks.
"""
from __future__ import annotations

import numpy as np
import torch
from sklearn.base import BaseEstimator

from .backbone import BackboneConfig, param_count
from .errors import ConfigError, ShapeError
from .model import ModelConfig, SegmentationModel
from .train import TrainConfig, mean_sample_dice, train_model
from .validation import as_float_array, check_binary_array


def _as_image_stack(X, name: str = "X") -> np.ndarray:
    X = as_float_array(X, name, ndim=(3, 4), dtype=np.float32)
    if X.ndim == 3:
        X = X[..., None]
    return X


def _as_mask_stack(y, X: np.ndarray, name: str = "y") -> np.ndarray:
    y = check_binary_array(y, name, ndim=3)
    if y.shape != X.shape[:3]:
        raise ShapeError(f"{name} shape {y.shape} does not match images {X.shape[:3]}")
    return y.astype(np.float32)


class NerdSegmenter(BaseEstimator):
    """Binary segmenter with a position-conditioned classifier head.

    head selects the final scoring rule: "baseline" (position-blind),
    "nerdm" (per-pixel affine feature recalibration), or "nerdc" (per-pixel
    classifier weights). All other parameters mirror the backbone and
    training configs. When no validation set is passed to fit, a fraction
    of the training stack is held out with a seed-determined split.
    """

    def __init__(
        self,
        head: str = "nerdc",
        filters="low",
        feature_channels: int | None = None,
        norm: str = "instance",
        calibrator_hidden: tuple[int, ...] = (64, 64),
        positive_scale: bool = False,
        final_hidden: tuple[int, ...] = (),
        base_lr: float = 1e-3,
        weight_decay: float = 1e-6,
        batch_size: int = 14,
        epochs: int = 90,
        lr_milestones: tuple[float, ...] = (0.5, 0.7, 0.9),
        lr_factor: float = 0.5,
        loss: str = "bce_dice",
        threshold: float = 0.5,
        validation_fraction: float = 0.2,
        seed: int = 0,
    ):
        self.head = head
        self.filters = filters
        self.feature_channels = feature_channels
        self.norm = norm
        self.calibrator_hidden = calibrator_hidden
        self.positive_scale = positive_scale
        self.final_hidden = final_hidden
        self.base_lr = base_lr
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.epochs = epochs
        self.lr_milestones = lr_milestones
        self.lr_factor = lr_factor
        self.loss = loss
        self.threshold = threshold
        self.validation_fraction = validation_fraction
        self.seed = seed

    def _model_config(self, in_channels: int) -> ModelConfig:
        return ModelConfig(
            backbone=BackboneConfig(
                in_channels=in_channels,
                filters=self.filters,
                feature_channels=self.feature_channels,
                norm=self.norm,
            ),
            head=self.head,
            calibrator_hidden=tuple(self.calibrator_hidden),
            positive_scale=self.positive_scale,
            final_hidden=tuple(self.final_hidden),
        )

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            base_lr=self.base_lr,
            weight_decay=self.weight_decay,
            batch_size=self.batch_size,
            epochs=self.epochs,
            lr_milestones=tuple(self.lr_milestones),
            lr_factor=self.lr_factor,
            loss=self.loss,
            threshold=self.threshold,
            seed=self.seed,
        )

    def fit(self, X, y, X_val=None, y_val=None):
        X = _as_image_stack(X)
        y = _as_mask_stack(y, X)
        if (X_val is None) != (y_val is None):
            raise ConfigError("pass X_val and y_val together or neither")
        if X_val is None:
            n = X.shape[0]
            if n < 2:
                raise ConfigError("need at least 2 samples to hold out validation data")
            n_val = max(1, int(round(self.validation_fraction * n)))
            if n_val >= n:
                raise ConfigError(
                    f"validation_fraction {self.validation_fraction} leaves no training data"
                )
            order = np.random.default_rng([int(self.seed), 917]).permutation(n)
            val_idx, train_idx = order[:n_val], order[n_val:]
            X, X_val, y, y_val = X[train_idx], X[val_idx], y[train_idx], y[val_idx]
        else:
            X_val = _as_image_stack(X_val, "X_val")
            y_val = _as_mask_stack(y_val, X_val, "y_val")
        model = SegmentationModel(self._model_config(X.shape[-1]), seed=self.seed)
        result = train_model(model, (X, y), (X_val, y_val), self._train_config())
        self.model_ = result.model
        self.history_ = result.history
        self.best_val_dice_ = result.best_val_dice
        self.n_features_in_ = X.shape[-1]
        return self

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise ConfigError("this NerdSegmenter instance is not fitted yet")

    def predict(self, X) -> np.ndarray:
        """Binary masks (N, H, W) for a stack of images."""
        self._check_fitted()
        X = _as_image_stack(X)
        return self.model_.predict_mask(X, threshold=self.threshold,
                                        batch_size=self.batch_size)

    def predict_proba(self, X) -> np.ndarray:
        """Per-pixel foreground probabilities (N, H, W)."""
        self._check_fitted()
        X = _as_image_stack(X)
        was_training = self.model_.training
        self.model_.eval()
        try:
            with torch.no_grad():
                chunks = [
                    torch.sigmoid(self.model_(X[i : i + self.batch_size])).numpy()
                    for i in range(0, X.shape[0], self.batch_size)
                ]
        finally:
            self.model_.train(was_training)
        return np.concatenate(chunks, axis=0).astype(np.float64)

    def score(self, X, y) -> float:
        """Mean per-sample Dice of predict(X) against y."""
        X = _as_image_stack(X)
        y = _as_mask_stack(y, X)
        return mean_sample_dice(self.predict(X), y > 0.5)

    def parameter_overhead(self) -> dict:
        """Trainable parameter counts of the fitted model, by part."""
        self._check_fitted()
        calibrator = self.model_.calibrator_param_count()
        total = param_count(self.model_)
        return {"total": total, "calibrator": calibrator,
                "backbone": param_count(self.model_.backbone)}
