"""Independent brute-force reference for the surface-distance metrics.

Deliberately avoids the library's own code paths: surface extraction is a
per-voxel neighbor loop, nearest distances are chunked all-pairs scans and
the percentile is a hand-rolled closest-ranks interpolation.
"""

from __future__ import annotations

import numpy as np

_NEIGHBORS = [(-1, 0, 0), (1, 0, 0), (0, -1, 0), (0, 1, 0), (0, 0, -1), (0, 0, 1)]


def surface_points(voxels: np.ndarray, spacing) -> np.ndarray:
    v = voxels != 0
    d, h, w = v.shape
    pts = []
    for z, y, x in np.argwhere(v):
        for dz, dy, dx in _NEIGHBORS:
            nz, ny, nx = z + dz, y + dy, x + dx
            outside = not (0 <= nz < d and 0 <= ny < h and 0 <= nx < w)
            if outside or not v[nz, ny, nx]:
                pts.append((z, y, x))
                break
    return np.asarray(pts, dtype=np.float64) * np.asarray(spacing, dtype=np.float64)


def min_distances(a_pts: np.ndarray, b_pts: np.ndarray, chunk: int = 256) -> np.ndarray:
    out = np.empty(len(a_pts), dtype=np.float64)
    for i in range(0, len(a_pts), chunk):
        block = a_pts[i : i + chunk]
        d2 = ((block[:, None, :] - b_pts[None, :, :]) ** 2).sum(axis=2)
        out[i : i + chunk] = np.sqrt(d2.min(axis=1))
    return out


def percentile_linear(values: np.ndarray, q: float) -> float:
    s = np.sort(np.asarray(values, dtype=np.float64))
    rank = (len(s) - 1) * (q / 100.0)
    lo = int(np.floor(rank))
    hi = int(np.ceil(rank))
    if lo == hi:
        return float(s[lo])
    return float(s[lo] + (rank - lo) * (s[hi] - s[lo]))


def brute_force_metrics(a_vox, b_vox, spacing):
    """(dice, asd, hd95, hd) computed without the library."""
    av = a_vox != 0
    bv = b_vox != 0
    na, nb = int(av.sum()), int(bv.sum())
    dice = 1.0 if na + nb == 0 else 2.0 * int((av & bv).sum()) / (na + nb)
    sa = surface_points(a_vox, spacing)
    sb = surface_points(b_vox, spacing)
    dab = min_distances(sa, sb)
    dba = min_distances(sb, sa)
    asd_v = 0.5 * (dab.mean() + dba.mean())
    hd95_v = max(percentile_linear(dab, 95.0), percentile_linear(dba, 95.0))
    hd_v = max(dab.max(), dba.max())
    return dice, float(asd_v), float(hd95_v), float(hd_v)


def random_structured_mask(rng: np.random.Generator, shape) -> np.ndarray:
    """Union of a few balls and a box; never empty."""
    d, h, w = shape
    zz, yy, xx = np.meshgrid(
        np.arange(d), np.arange(h), np.arange(w), indexing="ij"
    )
    mask = np.zeros(shape, dtype=bool)
    for _ in range(rng.integers(1, 4)):
        cz = rng.uniform(0.2 * d, 0.8 * d)
        cy = rng.uniform(0.2 * h, 0.8 * h)
        cx = rng.uniform(0.2 * w, 0.8 * w)
        r = rng.uniform(2.0, 0.3 * min(shape))
        mask |= (zz - cz) ** 2 + (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    if rng.uniform() < 0.5:
        z0, y0, x0 = (rng.integers(0, s // 2) for s in shape)
        mask[z0 : z0 + d // 3 + 1, y0 : y0 + h // 3 + 1, x0 : x0 + w // 3 + 1] = True
    if not mask.any():
        mask[d // 2, h // 2, w // 2] = True
    return mask.astype(np.uint8)
