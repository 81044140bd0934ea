"""Differentiable rendering of keypoints into soft mask rasters.

Two representations are provided: isotropic Gaussian blobs around each joint
(the baseline form), and Gaussian line segments along bones merged by
pixel-wise summation (the skeleton form). Both use value exp(-d^2 / sigma^2)
where d is Euclidean distance in pixels; summation keeps the raster linear in
per-bone contributions, so overlapping bones can exceed 1 (accepted, the
target mask is {0,1} and overlaps are small at default widths).

Pixel centers sit at integer + 0.5 coordinates, keypoints live in continuous
pixel space; this makes integer-shift equivariance exact. All ops are torch
and differentiable with respect to the keypoints.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .geometry import SkeletonTopology

_EPS = 1e-8


@dataclass(frozen=True)
class RenderedMask:
    """A rendered raster plus the parameters that produced it."""

    values: np.ndarray
    sigma: float

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float32)
        if values.ndim != 2:
            raise ValueError("rendered mask must be a 2D raster")
        if not np.isfinite(values).all():
            raise ValueError("rendered mask contains non-finite values")
        if (values < 0).any():
            raise ValueError("rendered mask contains negative values")
        object.__setattr__(self, "values", values)

    @property
    def resolution(self) -> tuple[int, int]:
        return self.values.shape

    def to_png(self, path) -> None:
        """8-bit grayscale export; values linearly clamped to [0, 255]."""
        from PIL import Image

        arr = np.clip(self.values * 255.0, 0.0, 255.0).astype(np.uint8)
        Image.fromarray(arr, mode="L").save(path)


def pixel_grid(resolution, device=None, dtype=torch.float32) -> torch.Tensor:
    """(H, W, 2) raster of pixel-center coordinates, xy order."""
    H, W = resolution
    ys = torch.arange(H, device=device, dtype=dtype) + 0.5
    xs = torch.arange(W, device=device, dtype=dtype) + 0.5
    gy, gx = torch.meshgrid(ys, xs, indexing="ij")
    return torch.stack([gx, gy], dim=-1)


def point_segment_distance(p: torch.Tensor, a: torch.Tensor, b: torch.Tensor):
    """Distance from points to the closed segment [a, b], plus the clamped
    projection parameter t in [0, 1]. a == b degenerates to point distance
    (t = 0). Shapes broadcast over the leading dims; last dim is xy."""
    ab = b - a
    denom = (ab * ab).sum(-1).clamp_min(_EPS)
    t = (((p - a) * ab).sum(-1) / denom).clamp(0.0, 1.0)
    diff = p - (a + t.unsqueeze(-1) * ab)
    return torch.sqrt((diff * diff).sum(-1).clamp_min(0.0)), t


def _segment_sqdist(p: torch.Tensor, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    # squared form: smooth at d = 0 where sqrt would kill the gradient
    ab = b - a
    denom = (ab * ab).sum(-1).clamp_min(_EPS)
    t = (((p - a) * ab).sum(-1) / denom).clamp(0.0, 1.0)
    diff = p - (a + t.unsqueeze(-1) * ab)
    return (diff * diff).sum(-1)


def _check_sigma(sigma: float) -> float:
    sigma = float(sigma)
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    return sigma


def bone_mask(kpts: torch.Tensor, bone: tuple[int, int], sigma: float,
              resolution) -> torch.Tensor:
    """Gaussian line-segment raster for one bone.

    kpts: (..., J, 2) continuous pixel coordinates. Returns (..., H, W) with
    value exp(-d^2 / sigma^2), d the distance from the pixel center to the
    segment between the bone's two endpoints.
    """
    sigma = _check_sigma(sigma)
    i, j = bone
    grid = pixel_grid(resolution, device=kpts.device, dtype=kpts.dtype)
    a = kpts[..., i, :][..., None, None, :]
    b = kpts[..., j, :][..., None, None, :]
    d2 = _segment_sqdist(grid, a, b)
    return torch.exp(-d2 / (sigma * sigma))


def skeleton_mask(kpts: torch.Tensor, topology: SkeletonTopology, sigma: float,
                  resolution, active_bones=None, clamp: bool = False) -> torch.Tensor:
    """Pixel-wise sum of bone masks over ``active_bones`` (default: all).

    Interchanging any two bones leaves the raster unchanged, which is the
    representation's inherent labeling ambiguity. ``clamp`` optionally caps
    the sum at 1 (off by default).
    """
    sigma = _check_sigma(sigma)
    if active_bones is None:
        active_bones = tuple(range(topology.n_bones))
    active_bones = tuple(active_bones)
    if len(active_bones) == 0:
        raise ValueError("active bone set is empty, the mask loss would be ill-posed")
    for b in active_bones:
        if not (0 <= b < topology.n_bones):
            raise ValueError(f"bone index {b} out of range")
    layers = torch.stack([
        bone_mask(kpts, topology.bones[b], sigma, resolution) for b in active_bones
    ], dim=0)
    out = layers.sum(dim=0)
    if clamp:
        out = out.clamp(max=1.0)
    return out


def gaussian_baseline_mask(kpts: torch.Tensor, sigma: float, resolution) -> torch.Tensor:
    """Sum of isotropic Gaussian blobs, one per joint: (..., H, W)."""
    sigma = _check_sigma(sigma)
    grid = pixel_grid(resolution, device=kpts.device, dtype=kpts.dtype)
    diff = grid[..., None, :, :, :] - kpts[..., :, None, None, :]  # (..., J, H, W, 2)
    d2 = (diff * diff).sum(-1)
    return torch.exp(-d2 / (sigma * sigma)).sum(dim=-3)


def rendered(values: torch.Tensor, sigma: float) -> RenderedMask:
    """Wrap a single (H, W) raster for export."""
    return RenderedMask(values.detach().cpu().numpy(), sigma=float(sigma))
