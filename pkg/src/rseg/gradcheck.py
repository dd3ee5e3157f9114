"""Central finite-difference oracles for verifying autodiff gradients."""

from __future__ import annotations

import numpy as np


def max_rel_error(analytic, numeric, floor: float = 1e-6) -> float:
    """Elementwise |a - n| / max(|a|, |n|, floor), reduced with max.

    The floor keeps near-zero gradient entries from inflating the ratio
    with finite-difference noise.
    """
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    if a.shape != n.shape:
        raise ValueError(f"max_rel_error: shape mismatch {a.shape} vs {n.shape}")
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


def numeric_grad(f, arr: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Full central-difference gradient of scalar f() w.r.t. arr.

    f must re-run the forward pass reading arr; arr is perturbed in place
    and restored.
    """
    g = np.zeros_like(arr, dtype=np.float64)
    flat = arr.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        gf[i] = (fp - fm) / (2.0 * h)
    return g


def numeric_grad_sampled(f, arr: np.ndarray, flat_indices, h: float = 1e-5) -> np.ndarray:
    """Central differences at selected flat positions of arr only."""
    flat = arr.reshape(-1)
    out = np.zeros(len(flat_indices), dtype=np.float64)
    for k, i in enumerate(flat_indices):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        out[k] = (fp - fm) / (2.0 * h)
    return out


def sample_indices(rng: np.random.Generator, size: int, count: int) -> np.ndarray:
    """Up to `count` distinct flat indices into an array of `size` elements."""
    if size <= count:
        return np.arange(size)
    return rng.choice(size, size=count, replace=False)
