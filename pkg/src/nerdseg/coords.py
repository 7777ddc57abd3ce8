"""Per-pixel border distance fields.

Every pixel of an H x W grid is described by its four distances to the
image borders, ordered (top, right, bottom, left). The raw field counts
pixels; the normalized field divides each channel by the longest possible
distance along its axis, max(side - 1, 1), so values live in [0, 1] and
degenerate 1-pixel axes stay finite.
"""
from __future__ import annotations

import threading
from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation
from .validation import check_positive_int

CHANNELS = ("top", "right", "bottom", "left")


@dataclass(frozen=True)
class PositionField:
    """Border distances for each pixel of a fixed grid.

    values has shape (height, width, 4) with channels ordered as CHANNELS.
    The array is read-only; fields may be shared across threads and models.
    """

    height: int
    width: int
    values: np.ndarray
    normalized: bool

    def __post_init__(self):
        expected = (self.height, self.width, len(CHANNELS))
        if self.values.shape != expected:
            raise ContractViolation(
                f"position field values must have shape {expected}, got {self.values.shape}"
            )


def position_field(height: int, width: int) -> PositionField:
    """Build the raw (pixel-count) border distance field for an H x W grid."""
    height = check_positive_int("height", height)
    width = check_positive_int("width", width)
    rows = np.arange(height, dtype=np.float64)
    cols = np.arange(width, dtype=np.float64)
    top = np.broadcast_to(rows[:, None], (height, width))
    left = np.broadcast_to(cols[None, :], (height, width))
    values = np.stack([top, (width - 1) - left, (height - 1) - top, left], axis=-1)
    values.flags.writeable = False
    return PositionField(height, width, values, normalized=False)


def normalize_positions(field: PositionField) -> PositionField:
    """Scale each channel into [0, 1] by its axis extent, max(side - 1, 1)."""
    if field.normalized:
        raise ContractViolation("position field is already normalized")
    row_div = float(max(field.height - 1, 1))
    col_div = float(max(field.width - 1, 1))
    values = field.values / np.array([row_div, col_div, row_div, col_div])
    values.flags.writeable = False
    return PositionField(field.height, field.width, values, normalized=True)


_CACHE: dict[tuple[int, int], PositionField] = {}
_CACHE_LOCK = threading.Lock()


def cached_position_field(height: int, width: int) -> PositionField:
    """Normalized field for (height, width), computed once and shared.

    The returned arrays are read-only, so sharing across models and threads
    is safe.
    """
    key = (int(height), int(width))
    with _CACHE_LOCK:
        field = _CACHE.get(key)
        if field is None:
            field = normalize_positions(position_field(height, width))
            _CACHE[key] = field
    return field
