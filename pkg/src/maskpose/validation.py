"""Input validation helpers.

Small checks shared by the estimator API, the geometry types, and the CLI.
They normalize inputs to numpy arrays and raise early with messages that
name the offending argument.
"""

from __future__ import annotations

import numpy as np


def as_float_array(x, name: str, shape: tuple | None = None, dtype=np.float64) -> np.ndarray:
    """Coerce ``x`` to a float ndarray, optionally enforcing a shape.

    ``shape`` entries of -1 match any extent.
    """
    arr = np.asarray(x, dtype=dtype)
    if shape is not None:
        if arr.ndim != len(shape):
            raise ValueError(f"{name}: expected {len(shape)} dims, got shape {arr.shape}")
        for want, got in zip(shape, arr.shape):
            if want != -1 and want != got:
                raise ValueError(f"{name}: expected shape {shape}, got {arr.shape}")
    return arr


def check_finite(arr: np.ndarray, name: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


def check_binary_mask(mask, name: str = "mask") -> np.ndarray:
    """Validate a single-channel {0,1} raster and return it as bool (H, W)."""
    arr = np.asarray(mask)
    if arr.ndim != 2:
        raise ValueError(f"{name}: expected a 2D raster, got shape {arr.shape}")
    if arr.dtype == bool:
        return arr
    vals = np.unique(arr)
    allowed = {0, 1} if arr.max(initial=0) <= 1 else {0, 255}
    if not set(np.asarray(vals).tolist()) <= allowed:
        raise ValueError(f"{name}: raster is not binary (values {vals[:8]})")
    return arr > (0 if allowed == {0, 1} else 127)


def check_same_resolution(a: np.ndarray, b: np.ndarray, what: str = "rasters") -> None:
    if a.shape[-2:] != b.shape[-2:]:
        raise ValueError(f"resolution mismatch between {what}: {a.shape[-2:]} vs {b.shape[-2:]}")


def check_joint_count(coords: np.ndarray, n_joints: int, name: str) -> None:
    if coords.shape[0] != n_joints:
        raise ValueError(f"{name}: expected {n_joints} joints, got {coords.shape[0]}")


def check_mask_stack(X, n_views: int | None = None) -> np.ndarray:
    """Validate estimator input: an (N, V, H, W) stack of binary masks.

    Returns the stack as float32 in [0, 1].
    """
    arr = np.asarray(X)
    if arr.ndim != 4:
        raise ValueError(f"X: expected (n_samples, n_views, H, W) masks, got shape {arr.shape}")
    if n_views is not None and arr.shape[1] != n_views:
        raise ValueError(f"X: expected {n_views} views per sample, got {arr.shape[1]}")
    arr = arr.astype(np.float32)
    hi = arr.max(initial=0.0)
    if hi > 1.0:
        arr = arr / 255.0
    if arr.min(initial=0.0) < 0.0 or arr.max(initial=0.0) > 1.0:
        raise ValueError("X: mask values must lie in [0, 1] (or [0, 255])")
    return arr
