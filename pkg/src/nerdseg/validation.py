"""Input validation helpers.

Small checks used at the public entry points of the package. They raise
ShapeError / ConfigError with messages that name the offending argument
and axis, so callers get actionable errors instead of cryptic broadcasts.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np

from .errors import ConfigError, ShapeError


def check_positive_int(name: str, value) -> int:
    if not isinstance(value, (int, np.integer)) or isinstance(value, bool):
        raise ConfigError(f"{name} must be an integer, got {value!r}")
    if value < 1:
        raise ConfigError(f"{name} must be >= 1, got {value}")
    return int(value)


def check_fraction(name: str, value) -> float:
    value = float(value)
    if not 0.0 < value < 1.0:
        raise ConfigError(f"{name} must lie strictly inside (0, 1), got {value}")
    return value


def check_choice(name: str, value, choices: Sequence[str]) -> str:
    if value not in choices:
        raise ConfigError(f"{name} must be one of {sorted(choices)!r}, got {value!r}")
    return value


def as_float_array(arr, name: str, ndim=None, dtype=np.float64) -> np.ndarray:
    arr = np.asarray(arr, dtype=dtype)
    if ndim is not None:
        allowed = (ndim,) if isinstance(ndim, int) else tuple(ndim)
        if arr.ndim not in allowed:
            raise ShapeError(
                f"{name} must have {' or '.join(str(n) for n in allowed)} "
                f"dimensions, got shape {arr.shape}"
            )
    if not np.isfinite(arr).all():
        raise ShapeError(f"{name} contains non-finite values")
    return arr


def check_binary_array(arr, name: str, ndim=None) -> np.ndarray:
    """Coerce to a boolean array, rejecting values outside {0, 1}."""
    arr = np.asarray(arr)
    if ndim is not None:
        allowed = (ndim,) if isinstance(ndim, int) else tuple(ndim)
        if arr.ndim not in allowed:
            raise ShapeError(
                f"{name} must have {' or '.join(str(n) for n in allowed)} "
                f"dimensions, got shape {arr.shape}"
            )
    if arr.dtype == bool:
        return arr
    values = np.unique(arr)
    if not np.isin(values, (0, 1)).all():
        raise ShapeError(f"{name} must be binary, found values {values[:8]!r}")
    return arr.astype(bool)


def check_same_shape(a: np.ndarray, b: np.ndarray, name_a: str, name_b: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(
            f"{name_a} and {name_b} must share a shape, got {a.shape} vs {b.shape}"
        )


def take_keys(d: dict, defaults: dict, where: str) -> dict:
    """Overlay a config mapping onto its defaults, rejecting unknown keys."""
    if not isinstance(d, dict):
        raise ConfigError(f"{where} must be a mapping, got {type(d).__name__}")
    unknown = set(d) - set(defaults)
    if unknown:
        raise ConfigError(f"unknown {where} keys: {sorted(unknown)}")
    merged = dict(defaults)
    merged.update(d)
    return merged


def check_spacing(spacing, ndim: int) -> tuple[float, ...]:
    spacing = tuple(float(s) for s in spacing)
    if len(spacing) != ndim:
        raise ShapeError(
            f"spacing must provide one value per axis ({ndim}), got {len(spacing)}"
        )
    if any(s <= 0 or not np.isfinite(s) for s in spacing):
        raise ConfigError(f"spacing entries must be positive and finite, got {spacing}")
    return spacing
