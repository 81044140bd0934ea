"""Training objectives: mask losses, their weighted combination, and the
multi-view consistency loss built from triangulate -> reproject -> render.

All losses are pixel means rather than sums, so the lambda balance weights do
not depend on raster resolution. The optional geodesic weight raster enters
linearly: loss = mean(G * residual^2), which makes the unweighted loss the
exact alpha -> 0 limit and means scaling G scales the loss proportionally.

Everything here is torch and differentiable with respect to the keypoint
predictions; the multi-view loss additionally backpropagates through the
homogeneous least-squares triangulation solve, which is what couples the
views and lets a consistent 3D explanation win over per-view ambiguities.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .errors import DegenerateGeometryError
from .geometry import SkeletonTopology, project_points, triangulate_points
from .rendering import skeleton_mask

_GAP_TOL = 1e-9


@dataclass(frozen=True)
class LossWeights:
    """Balance weights for the skeleton and physique terms."""

    lambda_s: float = 1.0
    lambda_p: float = 0.0

    def __post_init__(self):
        if self.lambda_s < 0 or self.lambda_p < 0:
            raise ValueError("loss weights must be nonnegative")
        if self.lambda_s == 0 and self.lambda_p == 0:
            raise ValueError("at least one loss weight must be positive")


def _check_weight(weight, mask):
    if weight is not None and weight.shape[-2:] != mask.shape[-2:]:
        raise ValueError(
            f"weight map resolution {tuple(weight.shape[-2:])} does not match "
            f"mask resolution {tuple(mask.shape[-2:])}")


def _weighted_mean_sq(residual: torch.Tensor, weight) -> torch.Tensor:
    sq = residual * residual
    if weight is not None:
        sq = weight * sq
    return sq.mean()


def skeleton_loss(mask_gt: torch.Tensor, kpts2d: torch.Tensor,
                  topology: SkeletonTopology, sigma: float,
                  active_bones=None, weight=None) -> torch.Tensor:
    """Mean (optionally weighted) squared residual between the mask and the
    rendered skeleton. mask_gt: (..., H, W); kpts2d: (..., J, 2)."""
    _check_weight(weight, mask_gt)
    render = skeleton_mask(kpts2d, topology, sigma, mask_gt.shape[-2:],
                           active_bones=active_bones)
    return _weighted_mean_sq(mask_gt - render, weight)


def physique_loss(mask_gt: torch.Tensor, kpts2d: torch.Tensor,
                  topology: SkeletonTopology, sigma: float, spn,
                  active_bones=None, weight=None) -> torch.Tensor:
    """Mean (optionally weighted) squared residual between the mask and the
    shape prior network's physique prediction from the rendered skeleton.
    ``spn`` is any callable mapping (N, 1, H, W) -> (N, 1, H, W); gradients
    flow to both its parameters and the keypoints."""
    _check_weight(weight, mask_gt)
    render = skeleton_mask(kpts2d, topology, sigma, mask_gt.shape[-2:],
                           active_bones=active_bones)
    flat = render.reshape(-1, 1, *render.shape[-2:])
    physique = spn(flat).reshape(render.shape)
    return _weighted_mean_sq(mask_gt - physique, weight)


def combined_loss(mask_gt: torch.Tensor, kpts2d: torch.Tensor,
                  topology: SkeletonTopology, sigma: float, weights: LossWeights,
                  spn=None, active_bones=None, weight=None, return_parts=False):
    """lambda_s * skeleton + lambda_p * physique. The physique term needs a
    shape prior network whenever lambda_p > 0."""
    zero = torch.zeros((), dtype=kpts2d.dtype, device=kpts2d.device)
    l_skel = (skeleton_loss(mask_gt, kpts2d, topology, sigma, active_bones, weight)
              if weights.lambda_s > 0 else zero)
    if weights.lambda_p > 0:
        if spn is None:
            raise ValueError("lambda_p > 0 requires a shape prior network")
        l_physo = physique_loss(mask_gt, kpts2d, topology, sigma, spn,
                                active_bones, weight)
    else:
        l_physo = zero
    total = weights.lambda_s * l_skel + weights.lambda_p * l_physo
    if return_parts:
        return total, l_skel, l_physo
    return total


def multiview_consistency_loss(masks: torch.Tensor, kpts2d: torch.Tensor,
                               K: torch.Tensor, E: torch.Tensor,
                               topology: SkeletonTopology,
                               sigma: float, weights: LossWeights, spn=None,
                               active_bones=None, weight=None,
                               min_depth: float = 100.0, return_parts=False):
    """Cross-view coupling loss.

    masks: (V, ..., H, W); kpts2d: (V, ..., J, 2) per-view predictions;
    K: (V, 3, 3) and E: (V, 3, 4) cameras; weight: optional (V, ..., H, W).
    Per-view 2D predictions are triangulated into a single 3D pose, which is
    reprojected into every view and rendered; the combined mask loss is
    summed over views. Reprojection clamps depth from below so a transient
    behind-camera estimate cannot produce infinities mid-training.
    """
    V = masks.shape[0]
    if V < 2 or kpts2d.shape[0] != V or K.shape[0] != V or E.shape[0] != V:
        raise ValueError("need masks, predictions, and cameras for >= 2 views")
    X, gap = triangulate_points(kpts2d, K, E, return_gap=True)
    if (gap < _GAP_TOL).any():
        bad = (gap < _GAP_TOL).nonzero()
        joint = int(bad[0, -1])
        raise DegenerateGeometryError(
            f"joint {joint}: triangulation is degenerate (coincident or "
            f"parallel view rays)")
    P = K @ E
    reproj = project_points(X.unsqueeze(0).expand(V, *X.shape),
                            P.reshape(V, *([1] * (X.dim() - 2)), 3, 4),
                            min_depth=min_depth)
    total = None
    t_skel = None
    t_physo = None
    for v in range(V):
        wv = weight[v] if weight is not None else None
        part, l_s, l_p = combined_loss(masks[v], reproj[v], topology, sigma,
                                       weights, spn=spn, active_bones=active_bones,
                                       weight=wv, return_parts=True)
        total = part if total is None else total + part
        t_skel = l_s if t_skel is None else t_skel + l_s
        t_physo = l_p if t_physo is None else t_physo + l_p
    if return_parts:
        return total, t_skel, t_physo
    return total


def supervised_loss(pred: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    """Mean squared coordinate error between 3D keypoint sets."""
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(gt.shape)}")
    diff = pred - gt
    return (diff * diff).mean()
