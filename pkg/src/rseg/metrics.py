"""Volumetric overlap and surface-distance metrics with physical spacing.

Surfaces are foreground voxels with at least one background 6-neighbor
(out-of-bounds counts as background), emitted as voxel centers scaled by
the (z, y, x) spacing in mm. Nearest neighbors come from a k-d tree; the
brute-force pairwise computation is the test oracle and must agree to
1e-9 mm.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree


class EmptyMaskError(ValueError):
    """Distance metrics are undefined when a mask has no surface."""


@dataclass(frozen=True)
class VolumeMask:
    """Binary (D, H, W) voxel grid with per-axis spacing in mm."""

    voxels: np.ndarray
    spacing_mm: tuple

    def __post_init__(self):
        v = self.voxels
        if v.ndim != 3:
            raise ValueError(f"mask must be 3-d, got shape {v.shape}")
        if not np.all((v == 0) | (v == 1)):
            raise ValueError("mask voxels must be binary")
        if len(self.spacing_mm) != 3 or any(s <= 0 for s in self.spacing_mm):
            raise ValueError(f"spacing must be 3 positive reals, got {self.spacing_mm}")

    @property
    def dims(self) -> tuple:
        return self.voxels.shape

    def count(self) -> int:
        return int(np.count_nonzero(self.voxels))


@dataclass(frozen=True)
class MetricsReport:
    scan_id: str
    dice: float
    asd_mm: float
    hd95_mm: float
    hd_mm: float


def _check_dims(a: VolumeMask, b: VolumeMask, op: str) -> None:
    if a.dims != b.dims:
        raise ValueError(f"{op}: dims mismatch {a.dims} vs {b.dims}")


def dice_coefficient(a: VolumeMask, b: VolumeMask) -> float:
    """2|A n B| / (|A| + |B|), exact integer counts; both empty -> 1.0."""
    _check_dims(a, b, "dice_coefficient")
    av = a.voxels != 0
    bv = b.voxels != 0
    na, nb = int(av.sum()), int(bv.sum())
    if na + nb == 0:
        return 1.0
    inter = int(np.count_nonzero(av & bv))
    return 2.0 * inter / (na + nb)


def extract_surface(m: VolumeMask) -> np.ndarray:
    """(K, 3) float64 mm coordinates of boundary voxel centers."""
    v = m.voxels != 0
    if not v.any():
        raise EmptyMaskError("extract_surface: empty mask")
    p = np.pad(v, 1, constant_values=False)
    all_neighbors_fg = (
        p[:-2, 1:-1, 1:-1]
        & p[2:, 1:-1, 1:-1]
        & p[1:-1, :-2, 1:-1]
        & p[1:-1, 2:, 1:-1]
        & p[1:-1, 1:-1, :-2]
        & p[1:-1, 1:-1, 2:]
    )
    surface = v & ~all_neighbors_fg
    idx = np.argwhere(surface)
    return idx.astype(np.float64) * np.asarray(m.spacing_mm, dtype=np.float64)


def _nearest_distances(a_pts: np.ndarray, b_pts: np.ndarray) -> np.ndarray:
    """Min Euclidean distance from each point of A to the set B."""
    if len(a_pts) == 0 or len(b_pts) == 0:
        raise EmptyMaskError("nearest distances need nonempty point sets")
    d, _ = cKDTree(b_pts).query(a_pts, k=1)
    return np.asarray(d, dtype=np.float64)


def directed_avg_distance(a_pts: np.ndarray, b_pts: np.ndarray) -> float:
    return float(np.mean(_nearest_distances(a_pts, b_pts)))


def _directed_stats(a: VolumeMask, b: VolumeMask):
    sa = extract_surface(a)
    sb = extract_surface(b)
    return _nearest_distances(sa, sb), _nearest_distances(sb, sa)


def asd(a: VolumeMask, b: VolumeMask) -> float:
    """Average symmetric surface distance in mm."""
    _check_dims(a, b, "asd")
    dab, dba = _directed_stats(a, b)
    return 0.5 * (float(np.mean(dab)) + float(np.mean(dba)))


def hausdorff(a: VolumeMask, b: VolumeMask) -> float:
    _check_dims(a, b, "hausdorff")
    dab, dba = _directed_stats(a, b)
    return max(float(np.max(dab)), float(np.max(dba)))


def hd95(a: VolumeMask, b: VolumeMask) -> float:
    """Max over both directions of the 95th-percentile nearest distance."""
    _check_dims(a, b, "hd95")
    dab, dba = _directed_stats(a, b)
    return max(
        float(np.percentile(dab, 95, method="linear")),
        float(np.percentile(dba, 95, method="linear")),
    )


def evaluate(pred: VolumeMask, gt: VolumeMask, scan_id: str) -> MetricsReport:
    """All four metrics from one pair of surface extractions."""
    _check_dims(pred, gt, "evaluate")
    if tuple(pred.spacing_mm) != tuple(gt.spacing_mm):
        raise ValueError(
            f"evaluate: spacing mismatch {pred.spacing_mm} vs {gt.spacing_mm}"
        )
    dice = dice_coefficient(pred, gt)
    dab, dba = _directed_stats(pred, gt)
    return MetricsReport(
        scan_id=scan_id,
        dice=dice,
        asd_mm=0.5 * (float(np.mean(dab)) + float(np.mean(dba))),
        hd95_mm=max(
            float(np.percentile(dab, 95, method="linear")),
            float(np.percentile(dba, 95, method="linear")),
        ),
        hd_mm=max(float(np.max(dab)), float(np.max(dba))),
    )


def write_report_csv(reports, path) -> None:
    """scan_id,dice,asd_mm,hd95_mm,hd_mm rows with 6 decimals, LF endings."""
    lines = ["scan_id,dice,asd_mm,hd95_mm,hd_mm"]
    for r in reports:
        lines.append(
            f"{r.scan_id},{r.dice:.6f},{r.asd_mm:.6f},{r.hd95_mm:.6f},{r.hd_mm:.6f}"
        )
    with open(path, "w", newline="") as f:
        f.write("\n".join(lines) + "\n")
