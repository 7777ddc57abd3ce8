"""Segmentation quality metrics.

Voxel overlap (Dice, Jaccard), lesion-wise detection scores over connected
components, and surface distances between mask boundaries. Conventions
that vary across the literature are pinned down here and echoed into every
report:

- components use full connectivity by default (8 in 2D, 26 in 3D);
- a reference lesion counts as detected if any predicted voxel touches it;
- lesion Dice is factor * detected / (gt_lesions + pred_lesions), 1.0 when
  both images have no lesions; ratios with a zero denominator are missing;
- boundary voxels are foreground voxels with a face-adjacent background
  neighbor (outside the array counts as background); distances are
  Euclidean mm between voxel centers;
- the 95th percentile is the nearest-rank (no interpolation), taken per
  direction, then the worse direction is reported.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .errors import ConfigError, EmptyMaskError, ShapeError
from .validation import check_binary_array, check_same_shape, check_spacing

CONNECTIVITY_ORDERS = {2: {4: 1, 8: 2}, 3: {6: 1, 26: 3}}
DEFAULT_CONNECTIVITY = {2: 8, 3: 26}
METRIC_COLUMNS = ("dice", "jaccard", "ldice", "ltpr", "lppv", "lfpr", "hd", "hd95", "asd")


def dice(pred, gt) -> float:
    """Voxel Dice overlap; two empty masks agree perfectly (1.0)."""
    pred = check_binary_array(pred, "pred")
    gt = check_binary_array(gt, "gt")
    check_same_shape(pred, gt, "pred", "gt")
    total = int(pred.sum()) + int(gt.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((pred & gt).sum()) / total


def jaccard(pred, gt) -> float:
    """Intersection over union; 1.0 when both masks are empty."""
    pred = check_binary_array(pred, "pred")
    gt = check_binary_array(gt, "gt")
    check_same_shape(pred, gt, "pred", "gt")
    union = int((pred | gt).sum())
    if union == 0:
        return 1.0
    return int((pred & gt).sum()) / union


@dataclass(frozen=True)
class LesionSet:
    """Connected components of a mask, as sorted flat-index arrays.

    Components are ordered by their smallest flat (row-major) index, so the
    decomposition is deterministic and independent of labeling internals.
    """

    shape: tuple[int, ...]
    connectivity: int
    components: tuple[np.ndarray, ...]

    def __len__(self) -> int:
        return len(self.components)

    def foreground(self) -> np.ndarray:
        flat = np.zeros(int(np.prod(self.shape)), dtype=bool)
        for comp in self.components:
            flat[comp] = True
        return flat


def connected_components(mask, connectivity: int | None = None) -> LesionSet:
    """Decompose a 2D or 3D binary mask into connected components.

    Allowed connectivities are 4/8 in 2D and 6/26 in 3D; the default is the
    full neighborhood (8 or 26).
    """
    mask = check_binary_array(mask, "mask", ndim=(2, 3))
    orders = CONNECTIVITY_ORDERS[mask.ndim]
    if connectivity is None:
        connectivity = DEFAULT_CONNECTIVITY[mask.ndim]
    if connectivity not in orders:
        raise ConfigError(
            f"connectivity for a {mask.ndim}D mask must be one of "
            f"{sorted(orders)}, got {connectivity}"
        )
    structure = ndimage.generate_binary_structure(mask.ndim, orders[connectivity])
    labeled, count = ndimage.label(mask, structure=structure)
    flat = labeled.ravel()
    order = np.argsort(flat, kind="stable")
    sizes = np.bincount(flat, minlength=count + 1)
    groups = np.split(order, np.cumsum(sizes)[:-1])[1:]
    components = sorted((np.sort(g) for g in groups), key=lambda g: g[0])
    return LesionSet(shape=mask.shape, connectivity=int(connectivity),
                     components=tuple(components))


@dataclass(frozen=True)
class LesionCounts:
    gt_total: int
    pred_total: int
    gt_detected: int   # gt components touched by any predicted voxel
    pred_matched: int  # pred components touching any gt voxel


def lesion_counts(pred: LesionSet, gt: LesionSet) -> LesionCounts:
    if pred.shape != gt.shape:
        raise ShapeError(f"component sets come from different shapes: {pred.shape} vs {gt.shape}")
    pred_fg = pred.foreground()
    gt_fg = gt.foreground()
    gt_detected = sum(1 for comp in gt.components if pred_fg[comp].any())
    pred_matched = sum(1 for comp in pred.components if gt_fg[comp].any())
    return LesionCounts(len(gt), len(pred), gt_detected, pred_matched)


@dataclass(frozen=True)
class LesionMetrics:
    ldice: float
    ltpr: float | None
    lppv: float | None
    lfpr: float | None


def lesion_metrics(counts: LesionCounts, ldice_factor: float = 2.0) -> LesionMetrics:
    """Detection scores from lesion counts; undefined ratios come back None."""
    gl, pl = counts.gt_total, counts.pred_total
    if gl + pl == 0:
        ldice = 1.0
    else:
        ldice = ldice_factor * counts.gt_detected / (gl + pl)
    ltpr = None if gl == 0 else counts.gt_detected / gl
    if pl == 0:
        lppv = lfpr = None
    else:
        lppv = counts.pred_matched / pl
        lfpr = 1.0 - lppv  # share of predicted lesions touching no gt lesion
    return LesionMetrics(ldice=ldice, ltpr=ltpr, lppv=lppv, lfpr=lfpr)


@dataclass(frozen=True)
class SurfaceDistances:
    """Directed boundary distance multisets, each sorted ascending, in mm."""

    pred_to_gt: np.ndarray
    gt_to_pred: np.ndarray


def boundary_voxels(mask: np.ndarray) -> np.ndarray:
    """Foreground voxels with a face-adjacent background neighbor.

    Positions outside the array count as background, so foreground touching
    the array edge is part of the boundary.
    """
    structure = ndimage.generate_binary_structure(mask.ndim, 1)
    eroded = ndimage.binary_erosion(mask, structure=structure, border_value=0)
    return mask & ~eroded


def surface_distances(pred, gt, spacing=None) -> SurfaceDistances:
    """Distances between mask boundaries, in physical units.

    Each boundary voxel contributes the distance from its center to the
    nearest boundary-voxel center of the other mask. Raises EmptyMaskError
    when either mask has no foreground, since its surface is undefined.
    """
    pred = check_binary_array(pred, "pred", ndim=(2, 3))
    gt = check_binary_array(gt, "gt", ndim=(2, 3))
    check_same_shape(pred, gt, "pred", "gt")
    if spacing is None:
        spacing = (1.0,) * pred.ndim
    spacing = np.asarray(check_spacing(spacing, pred.ndim))
    if not pred.any():
        raise EmptyMaskError("prediction mask is empty; its surface is undefined")
    if not gt.any():
        raise EmptyMaskError("reference mask is empty; its surface is undefined")
    pred_pts = np.argwhere(boundary_voxels(pred)) * spacing
    gt_pts = np.argwhere(boundary_voxels(gt)) * spacing
    pred_to_gt = cKDTree(gt_pts).query(pred_pts)[0]
    gt_to_pred = cKDTree(pred_pts).query(gt_pts)[0]
    return SurfaceDistances(np.sort(pred_to_gt), np.sort(gt_to_pred))


def nearest_rank(values: np.ndarray, q: float) -> float:
    """Nearest-rank percentile: the ceil(q/100 * n)-th smallest value."""
    if len(values) == 0:
        raise ValueError("percentile of an empty multiset")
    if not 0 < q <= 100:
        raise ConfigError(f"percentile must lie in (0, 100], got {q}")
    rank = math.ceil(q / 100.0 * len(values))
    return float(np.sort(values)[rank - 1])


def hd(distances: SurfaceDistances) -> float:
    """Hausdorff distance: the worse of the two directed maxima."""
    return float(max(distances.pred_to_gt.max(), distances.gt_to_pred.max()))


def hd95(distances: SurfaceDistances) -> float:
    """Robust Hausdorff: nearest-rank 95th percentile per direction, worse one."""
    return float(max(nearest_rank(distances.pred_to_gt, 95),
                     nearest_rank(distances.gt_to_pred, 95)))


def asd(distances: SurfaceDistances) -> float:
    """Average symmetric surface distance: mean over both directed multisets."""
    pooled = np.concatenate([distances.pred_to_gt, distances.gt_to_pred])
    return float(pooled.mean())


def conventions(threshold: float = 0.5, connectivity: int | None = None,
                ldice_factor: float = 2.0) -> dict:
    """The convention block echoed into every metrics report."""
    return {
        "threshold": threshold,
        "connectivity": "full (8 in 2D, 26 in 3D)" if connectivity is None else connectivity,
        "ldice_factor": ldice_factor,
        "lesion_match": "any-voxel overlap",
        "surface": "face-boundary voxel centers, Euclidean mm",
        "hd95": "nearest-rank per direction, max of directions",
        "asd": "mean over both directed distance multisets",
        "missing": "blank cells mark undefined values (no lesions or empty surface)",
        "aggregate_std": "population (ddof=0)",
    }


def evaluate_masks(pred, gt, spacing=None, connectivity: int | None = None,
                   ldice_factor: float = 2.0) -> dict:
    """All metrics for one predicted/reference mask pair; None marks missing."""
    pred = check_binary_array(pred, "pred", ndim=(2, 3))
    gt = check_binary_array(gt, "gt", ndim=(2, 3))
    check_same_shape(pred, gt, "pred", "gt")
    row: dict[str, float | None] = {
        "dice": dice(pred, gt),
        "jaccard": jaccard(pred, gt),
    }
    lm = lesion_metrics(
        lesion_counts(
            connected_components(pred, connectivity),
            connected_components(gt, connectivity),
        ),
        ldice_factor,
    )
    row.update({"ldice": lm.ldice, "ltpr": lm.ltpr, "lppv": lm.lppv, "lfpr": lm.lfpr})
    try:
        sd = surface_distances(pred, gt, spacing)
        row.update({"hd": hd(sd), "hd95": hd95(sd), "asd": asd(sd)})
    except EmptyMaskError:
        row.update({"hd": None, "hd95": None, "asd": None})
    return row


def aggregate_metrics(rows: Sequence[dict]) -> dict:
    """Mean/std per metric over the defined entries, counting missing ones."""
    summary: dict[str, dict] = {}
    for name in METRIC_COLUMNS:
        values = [row[name] for row in rows if row.get(name) is not None]
        missing = sum(1 for row in rows if row.get(name) is None)
        if values:
            arr = np.asarray(values, dtype=np.float64)
            summary[name] = {"mean": float(arr.mean()), "std": float(arr.std()),
                             "n": len(values), "missing": missing}
        else:
            summary[name] = {"mean": None, "std": None, "n": 0, "missing": missing}
    return summary


def _cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_metrics_csv(path, rows: Sequence[dict], convention_block: dict,
                      id_field: str = "case") -> None:
    """Write per-case rows plus mean/std/missing footer, conventions on top.

    Output is a pure function of the inputs (floats via repr), so reruns of
    a deterministic pipeline produce byte-identical files.
    """
    summary = aggregate_metrics(rows)
    lines = [f"# {key} = {convention_block[key]}" for key in sorted(convention_block)]
    lines.append(",".join((id_field,) + METRIC_COLUMNS))
    for row in rows:
        lines.append(",".join([str(row[id_field])] +
                              [_cell(row.get(name)) for name in METRIC_COLUMNS]))
    for stat in ("mean", "std"):
        lines.append(",".join([stat] + [_cell(summary[name][stat])
                                        for name in METRIC_COLUMNS]))
    lines.append(",".join(["missing"] + [str(summary[name]["missing"])
                                         for name in METRIC_COLUMNS]))
    with open(path, "w", newline="") as fh:
        fh.write("\n".join(lines) + "\n")
