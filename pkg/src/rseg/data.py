"""Synthetic phantom generation, volume I/O and slicing into sequences.

Phantoms are horseshoe-shaped tubes swept through the slice axis with
smoothly drifting center, radius and orientation. The optional decoy is a
rigid copy of the object's current-slice arc dropped at a fresh random
position and rotation in every slice: within one slice it is
indistinguishable from the object, and only cross-slice continuity tells
the two apart. All randomness comes from a counter-based Philox generator
so the same spec and seed reproduce bit-identical data on any platform.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .metrics import VolumeMask

STREAK_INTENSITY = 2600.0

# MVF1: magic, u8 dtype code, 3 x u32 dims (D,H,W), 3 x f32 spacing (z,y,x),
# then the row-major little-endian payload
_MAGIC = b"MVF1"
_DTYPE_F32 = 0
_DTYPE_U8 = 1
_HEADER = struct.Struct("<B3I3f")

# observed mask voxel counts for the default 16x48x48 spec over seeds 0..49
# were 1979..3636; frozen with headroom
MASK_COUNT_BOUNDS = (1300, 5500)


@dataclass(frozen=True)
class Volume:
    """(D, H, W) f32 intensity grid with per-axis spacing in mm."""

    intensities: np.ndarray
    spacing_mm: tuple

    def __post_init__(self):
        arr = np.asarray(self.intensities, dtype=np.float32)
        object.__setattr__(self, "intensities", arr)
        if arr.ndim != 3:
            raise ValueError(f"volume must be 3-d, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("volume intensities must be finite")
        if len(self.spacing_mm) != 3 or any(s <= 0 for s in self.spacing_mm):
            raise ValueError(f"spacing must be 3 positive reals, got {self.spacing_mm}")

    @property
    def dims(self) -> tuple:
        return self.intensities.shape


@dataclass(frozen=True)
class PhantomSpec:
    dims: tuple = (16, 48, 48)
    noise_sigma: float = 30.0
    decoys: bool = False
    artifact_streaks: bool = False
    object_intensity: float = 1400.0
    decoy_intensity: float = 1400.0
    background_intensity: float = 0.0
    seed: int = 0

    def __post_init__(self):
        d, h, w = self.dims
        if d < 8 or h < 32 or w < 32:
            raise ValueError(f"dims {self.dims} too small, need at least (8, 32, 32)")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")


def derive_seed(base_seed: int, index: int) -> int:
    """Per-volume seed for dataset generation; injective for index < 100003."""
    return base_seed * 100003 + index


def _arc_distance(yy, xx, cy, cx, radius, theta0, dtheta):
    """Distance from each pixel to a circular arc with rounded caps."""
    dy = yy - cy
    dx = xx - cx
    rho = np.hypot(dy, dx)
    rel = np.mod(np.arctan2(dy, dx) - theta0, 2.0 * np.pi)
    d_ring = np.abs(rho - radius)
    t1 = theta0 + dtheta
    d_end = np.minimum(
        np.hypot(yy - (cy + radius * np.sin(theta0)), xx - (cx + radius * np.cos(theta0))),
        np.hypot(yy - (cy + radius * np.sin(t1)), xx - (cx + radius * np.cos(t1))),
    )
    return np.where(rel <= dtheta, d_ring, d_end)


def _arc_points(cy, cx, radius, theta0, dtheta, n=72):
    t = theta0 + dtheta * np.linspace(0.0, 1.0, n)
    return np.stack([cy + radius * np.sin(t), cx + radius * np.cos(t)], axis=1)


def _min_curve_distance(a, b) -> float:
    d2 = ((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=2)
    return float(np.sqrt(d2.min()))


def generate_phantom(spec: PhantomSpec):
    """Deterministic (Volume, VolumeMask) pair; mask covers the object only."""
    d, h, w = spec.dims
    rng = np.random.Generator(np.random.Philox(spec.seed))
    ext = float(min(h, w))

    tube0 = rng.uniform(2.0, 2.8)
    radius0 = rng.uniform(0.16, 0.21) * ext
    dtheta = rng.uniform(3.4, 4.4)
    gamma0 = rng.uniform(0.0, 2.0 * np.pi)
    drift_amp = rng.uniform(0.5, 1.5, size=2)
    drift_phase = rng.uniform(0.0, 2.0 * np.pi, size=2)
    drift_freq = rng.integers(1, 3, size=2)
    wobble_phase = rng.uniform(0.0, 2.0 * np.pi, size=3)
    # worst-case extent of the wobbled arc plus drift stays inside the frame
    margin = radius0 * 1.08 + tube0 * 1.1 + float(drift_amp.max()) + 1.5
    cy0 = rng.uniform(margin, h - 1 - margin)
    cx0 = rng.uniform(margin, w - 1 - margin)

    vol = np.full((d, h, w), spec.background_intensity, dtype=np.float64)
    mask = np.zeros((d, h, w), dtype=np.uint8)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)

    for z in range(d):
        ph = 2.0 * np.pi * z / d
        cy = cy0 + drift_amp[0] * np.sin(drift_freq[0] * ph + drift_phase[0])
        cx = cx0 + drift_amp[1] * np.sin(drift_freq[1] * ph + drift_phase[1])
        radius = radius0 * (1.0 + 0.08 * np.sin(ph + wobble_phase[1]))
        tube = tube0 * (1.0 + 0.10 * np.sin(ph + wobble_phase[2]))
        gamma = gamma0 + 0.15 * np.sin(ph + wobble_phase[0])

        fg = _arc_distance(yy, xx, cy, cx, radius, gamma, dtheta) <= tube
        mask[z][fg] = 1
        vol[z][fg] = spec.object_intensity

        if spec.decoys:
            _paint_decoy(rng, vol[z], mask[z], yy, xx, h, w,
                         cy, cx, radius, tube, gamma, dtheta, spec.decoy_intensity)

        if spec.artifact_streaks and rng.uniform() < 0.35:
            for _ in range(int(rng.integers(1, 3))):
                ang = rng.uniform(0.0, np.pi)
                offset = rng.uniform(-0.3, 0.3) * ext
                py = (h - 1) / 2.0 + offset * np.cos(ang)
                px = (w - 1) / 2.0 - offset * np.sin(ang)
                chord = np.abs((yy - py) * np.cos(ang) - (xx - px) * np.sin(ang)) <= 0.7
                vol[z][chord & (mask[z] == 0)] = STREAK_INTENSITY

    if spec.noise_sigma > 0:
        vol += rng.normal(0.0, spec.noise_sigma, size=vol.shape)

    return Volume(vol.astype(np.float32), (1.0, 1.0, 1.0)), VolumeMask(mask, (1.0, 1.0, 1.0))


def _paint_decoy(rng, vol_z, mask_z, yy, xx, h, w,
                 cy, cx, radius, tube, gamma, dtheta, intensity):
    """Same-shape arc at a fresh random pose, kept clear of the object."""
    obj_pts = _arc_points(cy, cx, radius, gamma, dtheta)
    m = radius + tube + 1.0
    want = 2.0 * tube + 1.5
    best = None
    best_d = -1.0
    for _ in range(80):
        dcy = rng.uniform(m, h - 1 - m)
        dcx = rng.uniform(m, w - 1 - m)
        dth = rng.uniform(0.0, 2.0 * np.pi)
        cand = _arc_points(dcy, dcx, radius, dth, dtheta)
        dist = _min_curve_distance(cand, obj_pts)
        if dist > best_d:
            best, best_d = (dcy, dcx, dth), dist
        if dist >= want:
            break
    # only draw if the tubes stay disjoint; teleporting is the point, touching is not
    if best_d >= 2.0 * tube + 0.5:
        dcy, dcx, dth = best
        fg = _arc_distance(yy, xx, dcy, dcx, radius, dth, dtheta) <= tube
        vol_z[fg & (mask_z == 0)] = intensity


# ---------------------------------------------------------------------------
# volume file I/O


def save_volume(obj, path) -> None:
    """Write a Volume (f32) or VolumeMask (u8) in the MVF1 layout."""
    if isinstance(obj, Volume):
        code = _DTYPE_F32
        payload = np.ascontiguousarray(obj.intensities, dtype="<f4").tobytes()
    elif isinstance(obj, VolumeMask):
        code = _DTYPE_U8
        payload = np.ascontiguousarray(obj.voxels, dtype=np.uint8).tobytes()
    else:
        raise TypeError(f"save_volume: expected Volume or VolumeMask, got {type(obj)!r}")
    d, h, w = (obj.intensities.shape if code == _DTYPE_F32 else obj.voxels.shape)
    sz, sy, sx = obj.spacing_mm
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(_HEADER.pack(code, d, h, w, sz, sy, sx))
        f.write(payload)


def load_volume(path):
    """Read an MVF1 file back as a Volume or VolumeMask."""
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != _MAGIC:
        raise ValueError(f"{path}: bad magic {raw[:4]!r}, expected {_MAGIC!r}")
    code, d, h, w, sz, sy, sx = _HEADER.unpack_from(raw, 4)
    offset = 4 + _HEADER.size
    count = d * h * w
    if code == _DTYPE_F32:
        expected = offset + 4 * count
        if len(raw) != expected:
            raise ValueError(f"{path}: payload length {len(raw) - offset}, expected {4 * count}")
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=offset).reshape(d, h, w)
        return Volume(arr.copy(), (sz, sy, sx))
    if code == _DTYPE_U8:
        expected = offset + count
        if len(raw) != expected:
            raise ValueError(f"{path}: payload length {len(raw) - offset}, expected {count}")
        arr = np.frombuffer(raw, dtype=np.uint8, count=count, offset=offset).reshape(d, h, w)
        return VolumeMask(arr.copy(), (sz, sy, sx))
    raise ValueError(f"{path}: unknown dtype code {code}")


def normalize_intensity(v: Volume, window=(300.0, 2000.0)) -> Volume:
    """Clamp to [lo, hi] then map affinely onto [0, 1]."""
    lo, hi = float(window[0]), float(window[1])
    if not lo < hi:
        raise ValueError(f"degenerate window {window}")
    arr = (np.clip(v.intensities, lo, hi) - lo) / (hi - lo)
    return Volume(arr.astype(np.float32), v.spacing_mm)


# ---------------------------------------------------------------------------
# slicing


@dataclass(frozen=True)
class SliceSequence:
    """Per-slice (1, 1, H, W) frames in traversal order, plus crop records."""

    frames: list
    labels: list | None
    direction: str
    orig_hw: tuple
    pad_offset: tuple
    spacing_mm: tuple

    def __len__(self) -> int:
        return len(self.frames)

    def restore(self, planes) -> np.ndarray:
        """Stack per-step (1, 1, H, W) planes back to (D, H, W) source order."""
        if len(planes) != len(self.frames):
            raise ValueError(f"restore: {len(planes)} planes for {len(self.frames)} slices")
        stack = np.concatenate([np.asarray(p).reshape(1, *p.shape[-2:]) for p in planes], axis=0)
        if self.direction == "descending":
            stack = stack[::-1]
        h, w = self.orig_hw
        top, left = self.pad_offset
        return np.ascontiguousarray(stack[:, top : top + h, left : left + w])


def to_sequence(v: Volume, labels: VolumeMask = None, direction: str = "ascending",
                pad_to: int = 1) -> SliceSequence:
    """Split along the slice axis, zero-padding H and W to a multiple of pad_to."""
    if direction not in ("ascending", "descending"):
        raise ValueError(f"direction must be ascending or descending, got {direction!r}")
    if pad_to < 1 or (pad_to & (pad_to - 1)) != 0:
        raise ValueError(f"pad_to must be a power of two, got {pad_to}")
    if labels is not None and labels.dims != v.dims:
        raise ValueError(f"labels dims {labels.dims} != volume dims {v.dims}")
    d, h, w = v.dims
    hp = -(-h // pad_to) * pad_to
    wp = -(-w // pad_to) * pad_to
    top = (hp - h) // 2
    left = (wp - w) // 2
    order = range(d) if direction == "ascending" else range(d - 1, -1, -1)

    def pad_plane(plane, dtype):
        out = np.zeros((1, 1, hp, wp), dtype=dtype)
        out[0, 0, top : top + h, left : left + w] = plane
        return out

    frames = [pad_plane(v.intensities[z], np.float32) for z in order]
    lab = None
    if labels is not None:
        lab = [pad_plane(labels.voxels[z], np.float32) for z in order]
    return SliceSequence(
        frames=frames,
        labels=lab,
        direction=direction,
        orig_hw=(h, w),
        pad_offset=(top, left),
        spacing_mm=v.spacing_mm,
    )
