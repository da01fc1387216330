"""Overlap and boundary-agreement metrics for integer label grids.

The surface metric extracts boundary voxels with 6-connectivity against the
complement (grid edges count as outside), measures nearest-boundary
distances in millimetres through the voxel spacing, and scores the fraction
of boundary voxels of each mask lying within the tolerance of the other.
"""

from __future__ import annotations

import numpy as np
from scipy.spatial import cKDTree

from .data import LabelVolume
from .errors import DataError


def _check_aligned(pred: LabelVolume, gt: LabelVolume, need_spacing: bool):
    if pred.dims != gt.dims:
        raise DataError(f"dims differ: {pred.dims} vs {gt.dims}")
    if need_spacing and pred.spacing != gt.spacing:
        raise DataError(f"spacings differ: {pred.spacing} vs {gt.spacing}")


def dice_score(pred: LabelVolume, gt: LabelVolume, cls: int) -> float:
    """2|P n G| / (|P| + |G|); 1.0 when both masks are empty."""
    _check_aligned(pred, gt, need_spacing=False)
    p = pred.labels == cls
    g = gt.labels == cls
    sp = int(p.sum())
    sg = int(g.sum())
    if sp + sg == 0:
        return 1.0
    return 2.0 * int(np.logical_and(p, g).sum()) / (sp + sg)


def boundary_voxels(mask: np.ndarray) -> np.ndarray:
    """Coordinates (K, 3) of mask voxels with a face neighbor outside the mask."""
    m = np.asarray(mask, dtype=bool)
    p = np.pad(m, 1, constant_values=False)
    all_neighbors = (p[:-2, 1:-1, 1:-1] & p[2:, 1:-1, 1:-1]
                     & p[1:-1, :-2, 1:-1] & p[1:-1, 2:, 1:-1]
                     & p[1:-1, 1:-1, :-2] & p[1:-1, 1:-1, 2:])
    return np.argwhere(m & ~all_neighbors)


def nsd_score(pred: LabelVolume, gt: LabelVolume, cls: int, tolerance_mm: float) -> float:
    """Normalized surface agreement at a physical tolerance.

    1.0 when both masks are empty, 0.0 when exactly one is.
    """
    _check_aligned(pred, gt, need_spacing=True)
    p = pred.labels == cls
    g = gt.labels == cls
    p_any = bool(p.any())
    g_any = bool(g.any())
    if not p_any and not g_any:
        return 1.0
    if p_any != g_any:
        return 0.0
    spacing = np.asarray(pred.spacing, dtype=np.float64)
    pb = boundary_voxels(p) * spacing
    gb = boundary_voxels(g) * spacing
    d_pg, _ = cKDTree(gb).query(pb, k=1)
    d_gp, _ = cKDTree(pb).query(gb, k=1)
    hits = int((d_pg <= tolerance_mm).sum()) + int((d_gp <= tolerance_mm).sum())
    return hits / (len(pb) + len(gb))
