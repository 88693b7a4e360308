"""Overlap and surface-distance metrics for label masks.

DSC is plain voxel overlap. NSD follows the standard normalized-surface-dice
definition: boundary voxels are foreground voxels with at least one
background 6-neighbor (the outside of the array counts as background);
distances between boundaries are exact Euclidean, scaled per-axis by voxel
spacing.
"""

from __future__ import annotations

import numpy as np
from scipy.ndimage import distance_transform_edt

from .errors import ShapeError
from .nifti import LabelVolume


def _binary(vol: LabelVolume, label: int) -> np.ndarray:
    return vol.data == np.uint16(label)


def dsc(pred: LabelVolume, gt: LabelVolume, label: int) -> float:
    """Dice coefficient 2|P∩G| / (|P|+|G|); both empty -> 1.0."""
    if pred.data.shape != gt.data.shape:
        raise ShapeError(f"mask shapes differ: {pred.data.shape} vs {gt.data.shape}")
    p = _binary(pred, label)
    g = _binary(gt, label)
    np_, ng = int(p.sum()), int(g.sum())
    if np_ + ng == 0:
        return 1.0
    inter = int(np.count_nonzero(p & g))
    return 2.0 * inter / (np_ + ng)


def boundary_voxels(mask: np.ndarray) -> np.ndarray:
    """Foreground voxels touching background through a face (6-neighborhood)."""
    if not mask.any():
        return np.zeros_like(mask, dtype=bool)
    padded = np.pad(mask, 1, constant_values=False)
    interior = np.ones_like(mask, dtype=bool)
    for axis in range(3):
        lo = [slice(1, -1)] * 3
        hi = [slice(1, -1)] * 3
        lo[axis] = slice(0, -2)
        hi[axis] = slice(2, None)
        interior &= padded[tuple(lo)]
        interior &= padded[tuple(hi)]
    return mask & ~interior


def nsd(
    pred: LabelVolume,
    gt: LabelVolume,
    label: int,
    tolerance_mm: float = 2.0,
    spacing: tuple[float, float, float] | None = None,
) -> float:
    """Normalized surface dice at the given tolerance.

    Fraction of boundary voxels of each mask lying within tolerance of the
    other mask's boundary, aggregated over both directions. Both masks
    empty -> 1.0; exactly one empty -> 0.0.
    """
    if pred.data.shape != gt.data.shape:
        raise ShapeError(f"mask shapes differ: {pred.data.shape} vs {gt.data.shape}")
    spacing = tuple(spacing) if spacing is not None else gt.spacing
    p = _binary(pred, label)
    g = _binary(gt, label)
    if not p.any() and not g.any():
        return 1.0
    if not p.any() or not g.any():
        return 0.0

    bp = boundary_voxels(p)
    bg = boundary_voxels(g)
    # distance of every voxel to the nearest boundary voxel of the other mask
    dist_to_g = distance_transform_edt(~bg, sampling=spacing)
    dist_to_p = distance_transform_edt(~bp, sampling=spacing)
    ok_p = int(np.count_nonzero(dist_to_g[bp] <= tolerance_mm))
    ok_g = int(np.count_nonzero(dist_to_p[bg] <= tolerance_mm))
    return (ok_p + ok_g) / (int(bp.sum()) + int(bg.sum()))
