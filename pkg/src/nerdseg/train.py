"""Optimization loop, learning-rate schedule, and loss.

Training is reproducible end to end: parameters come from the model's
seeded construction, batch order is a pure function of (seed, epoch), and
there is no other source of randomness in the loop. Interrupting a run and
resuming from its last checkpoint therefore replays the exact remaining
epochs and lands on the same final state.
"""
from __future__ import annotations

import copy
import csv
import math
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .data import SliceSample, samples_to_arrays
from .errors import ConfigError, ShapeError
from .heads import segment
from .metrics import dice
from .model import (
    CHECKPOINT_VERSION,
    SegmentationModel,
    model_config_from_dict,
    model_config_to_dict,
    save_checkpoint,
)
from .validation import check_positive_int

LOSS_KINDS = ("bce_dice", "bce", "dice")
DICE_EPS = 1e-7


@dataclass(frozen=True)
class TrainConfig:
    base_lr: float = 1e-3
    weight_decay: float = 1e-6
    batch_size: int = 14
    epochs: int = 90
    lr_milestones: tuple[float, ...] = (0.5, 0.7, 0.9)
    lr_factor: float = 0.5
    loss: str = "bce_dice"
    threshold: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.base_lr <= 0:
            raise ConfigError(f"base_lr must be > 0, got {self.base_lr}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be >= 0, got {self.weight_decay}")
        check_positive_int("batch_size", self.batch_size)
        check_positive_int("epochs", self.epochs)
        object.__setattr__(
            self, "lr_milestones", tuple(float(m) for m in self.lr_milestones)
        )
        for m in self.lr_milestones:
            if not 0.0 < m < 1.0:
                raise ConfigError(f"lr milestones must lie in (0, 1), got {m}")
        if list(self.lr_milestones) != sorted(self.lr_milestones):
            raise ConfigError(f"lr milestones must be sorted, got {self.lr_milestones}")
        if not 0.0 < self.lr_factor <= 1.0:
            raise ConfigError(f"lr_factor must lie in (0, 1], got {self.lr_factor}")
        if self.loss not in LOSS_KINDS:
            raise ConfigError(f"loss must be one of {LOSS_KINDS}, got {self.loss!r}")
        if not 0.0 < self.threshold < 1.0:
            raise ConfigError(f"threshold must lie in (0, 1), got {self.threshold}")


def lr_at(epoch: int, config: TrainConfig) -> float:
    """Learning rate for a 0-based epoch: the base rate decayed once per
    milestone already reached, where milestone m fires at floor(m * epochs).

    Milestones are treated as decimal fractions, so 0.7 of 90 epochs fires
    exactly at 63 rather than drifting on binary float error.
    """
    if not 0 <= epoch < config.epochs:
        raise ConfigError(f"epoch {epoch} outside the schedule [0, {config.epochs})")
    crossed = sum(
        1
        for m in config.lr_milestones
        if epoch >= math.floor(Fraction(str(m)) * config.epochs)
    )
    return config.base_lr * config.lr_factor**crossed


def segmentation_loss(logits: torch.Tensor, target: torch.Tensor,
                      kind: str = "bce_dice") -> torch.Tensor:
    """Mean binary cross-entropy plus soft Dice over the whole batch.

    The Dice term pools all pixels of the batch, so it is invariant to how
    samples are ordered within the batch.
    """
    if kind not in LOSS_KINDS:
        raise ConfigError(f"loss must be one of {LOSS_KINDS}, got {kind!r}")
    if logits.shape != target.shape:
        raise ShapeError(
            f"logits shape {tuple(logits.shape)} does not match target {tuple(target.shape)}"
        )
    target = target.to(logits.dtype)
    bad = ((target != 0) & (target != 1)).any()
    if bool(bad):
        raise ShapeError("target must be binary")
    terms = []
    if kind in ("bce_dice", "bce"):
        terms.append(torch.nn.functional.binary_cross_entropy_with_logits(logits, target))
    if kind in ("bce_dice", "dice"):
        probs = torch.sigmoid(logits)
        inter = (probs * target).sum()
        total = probs.sum() + target.sum()
        terms.append(1.0 - (2.0 * inter + DICE_EPS) / (total + DICE_EPS))
    return sum(terms)


def batch_order(seed: int, epoch: int, count: int) -> np.ndarray:
    """Sample order for an epoch; depends only on (seed, epoch, count)."""
    return np.random.default_rng([seed, epoch]).permutation(count)


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    val_dice: float


@dataclass
class TrainHistory:
    records: list[EpochRecord] = field(default_factory=list)
    selected_epoch: int = -1

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "lr", "train_loss", "val_dice"])
            for r in self.records:
                writer.writerow([r.epoch, repr(r.lr), repr(r.train_loss), repr(r.val_dice)])

    @staticmethod
    def from_csv(path) -> "TrainHistory":
        history = TrainHistory()
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                history.records.append(
                    EpochRecord(int(row["epoch"]), float(row["lr"]),
                                float(row["train_loss"]), float(row["val_dice"]))
                )
        return history


@dataclass
class TrainResult:
    model: SegmentationModel
    history: TrainHistory
    best_val_dice: float
    best_epoch: int


def mean_sample_dice(pred: np.ndarray, target: np.ndarray) -> float:
    """Mean per-sample Dice across a (N, ...) batch of binary masks."""
    return float(np.mean([dice(p, t) for p, t in zip(pred, target)]))


def _as_tensors(samples, name: str) -> tuple[torch.Tensor, torch.Tensor]:
    if isinstance(samples, tuple) and len(samples) == 2:
        images, labels = samples
        images = np.asarray(images, dtype=np.float32)
        labels = np.asarray(labels)
    else:
        images, labels = samples_to_arrays(list(samples))
    if images.ndim == 3:
        images = images[..., None]
    if images.ndim != 4:
        raise ShapeError(f"{name} images must be (N, H, W, C), got {images.shape}")
    if labels.shape != images.shape[:3]:
        raise ShapeError(
            f"{name} labels shape {labels.shape} does not match images {images.shape[:3]}"
        )
    return torch.from_numpy(np.ascontiguousarray(images)), \
        torch.from_numpy(np.ascontiguousarray(labels).astype(np.float32))


def _validate(model, images, labels, config) -> float:
    masks = model.predict_mask(images, threshold=config.threshold,
                               batch_size=config.batch_size)
    return mean_sample_dice(masks, labels.numpy() > 0.5)


_RESUME_KEYS = {"format_version", "model_config", "seed", "state_dict", "optimizer",
                "epoch", "best_epoch", "best_val_dice", "best_state", "history",
                "train_config"}


def _save_resume_point(path, model, optimizer, epoch, best_epoch, best_val, best_state,
                       history, config) -> None:
    torch.save(
        {
            "format_version": CHECKPOINT_VERSION,
            "model_config": model_config_to_dict(model.config),
            "seed": model.seed,
            "state_dict": model.state_dict(),
            "optimizer": optimizer.state_dict(),
            "epoch": epoch,
            "best_epoch": best_epoch,
            "best_val_dice": best_val,
            "best_state": best_state,
            "history": [asdict(r) for r in history.records],
            "train_config": asdict(config),
        },
        path,
    )


def train_model(
    model: SegmentationModel,
    train_samples,
    val_samples,
    config: TrainConfig,
    out_dir=None,
    resume: bool = False,
    progress: Callable[[EpochRecord], None] | None = None,
) -> TrainResult:
    """Train with Adam under the milestone schedule, tracking validation Dice.

    Keeps the parameters of the best validation epoch (earliest on ties)
    and restores them on return. With out_dir set, writes checkpoints/last.pt
    every epoch, checkpoints/best.pt at the end, and history.csv; resume=True
    picks an interrupted run up from last.pt and replays to the identical
    final state.
    """
    x_train, y_train = _as_tensors(train_samples, "train")
    x_val, y_val = _as_tensors(val_samples, "val")
    if x_train.shape[0] == 0 or x_val.shape[0] == 0:
        raise ConfigError("train and val splits must both be non-empty")

    optimizer = torch.optim.Adam(model.parameters(), lr=config.base_lr,
                                 weight_decay=config.weight_decay)
    history = TrainHistory()
    start_epoch = 0
    best_epoch, best_val = -1, -math.inf
    best_state = copy.deepcopy(model.state_dict())

    ckpt_dir = None
    if out_dir is not None:
        ckpt_dir = Path(out_dir) / "checkpoints"
        ckpt_dir.mkdir(parents=True, exist_ok=True)
        last = ckpt_dir / "last.pt"
        if resume and last.exists():
            payload = torch.load(last, map_location="cpu", weights_only=True)
            if payload.get("format_version") != CHECKPOINT_VERSION:
                raise ConfigError(f"cannot resume from {last}: unknown format_version")
            if payload["model_config"] != model_config_to_dict(model.config):
                raise ConfigError(f"cannot resume from {last}: model config differs")
            if payload["train_config"] != asdict(config):
                raise ConfigError(f"cannot resume from {last}: train config differs")
            model.load_state_dict(payload["state_dict"])
            optimizer.load_state_dict(payload["optimizer"])
            history.records = [EpochRecord(**r) for r in payload["history"]]
            start_epoch = payload["epoch"] + 1
            best_epoch = payload["best_epoch"]
            best_val = payload["best_val_dice"]
            best_state = payload["best_state"]

    n = x_train.shape[0]
    for epoch in range(start_epoch, config.epochs):
        lr = lr_at(epoch, config)
        for group in optimizer.param_groups:
            group["lr"] = lr
        model.train()
        order = batch_order(config.seed, epoch, n)
        loss_sum, seen = 0.0, 0
        for start in range(0, n, config.batch_size):
            idx = torch.from_numpy(order[start : start + config.batch_size].copy())
            logits = model(x_train[idx])
            loss = segmentation_loss(logits, y_train[idx], config.loss)
            if not torch.isfinite(loss):
                raise RuntimeError(
                    f"non-finite loss at epoch {epoch}, batch {start // config.batch_size}"
                )
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            loss_sum += float(loss.detach()) * len(idx)
            seen += len(idx)
        val_dice = _validate(model, x_val, y_val, config)
        record = EpochRecord(epoch, lr, loss_sum / seen, val_dice)
        history.records.append(record)
        if val_dice > best_val:
            best_val, best_epoch = val_dice, epoch
            best_state = copy.deepcopy(model.state_dict())
        if ckpt_dir is not None:
            _save_resume_point(ckpt_dir / "last.pt", model, optimizer, epoch,
                               best_epoch, best_val, best_state, history, config)
        if progress is not None:
            progress(record)

    history.selected_epoch = best_epoch
    model.load_state_dict(best_state)
    if ckpt_dir is not None:
        save_checkpoint(
            ckpt_dir / "best.pt", model,
            extra={"epoch": best_epoch, "val_dice": best_val,
                   "train_config": asdict(config)},
        )
        history.to_csv(Path(out_dir) / "history.csv")
    return TrainResult(model=model, history=history,
                       best_val_dice=best_val, best_epoch=best_epoch)
