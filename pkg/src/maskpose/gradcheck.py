"""Finite-difference verification of the differentiable operations.

Every check wraps one operation into a scalar function of a single input
tensor, takes its autograd gradient once, then probes random coordinates
with central differences in float64. The comparison is inf-norm relative
over the probed set, so an individual near-zero partial cannot blow up
the ratio. The suite is what the ``gradcheck`` command prints.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
import torch

from .geometry import camera_look_at, project_points, triangulate_points
from .losses import LossWeights, multiview_consistency_loss, physique_loss, skeleton_loss
from .models import ShapePriorNet, integral_readout, volume_softmax
from .puppet import puppet_topology
from .rendering import bone_mask, gaussian_baseline_mask, skeleton_mask

REL_TOL = 1e-3
DEFAULT_PROBES = 32


@dataclass(frozen=True)
class GradCheckRow:
    """One operation's probe result."""

    name: str
    n_probes: int
    rel_err: float
    tol: float
    seconds: float

    @property
    def ok(self) -> bool:
        return self.rel_err <= self.tol


def probe_gradient(f, x0: np.ndarray, n_probes: int, rng: np.random.Generator,
                   h: float = 1e-3) -> tuple[float, int]:
    """Autograd vs central differences at random coordinates of x0.

    Returns (max relative disagreement over the probes, probes used). The
    scale is the largest probed finite-difference magnitude.
    """
    xt = torch.tensor(x0, dtype=torch.float64, requires_grad=True)
    f(xt).backward()
    g_an = xt.grad.numpy().reshape(-1)
    flat = x0.reshape(-1).astype(np.float64)
    n = min(n_probes, flat.size)
    idx = rng.choice(flat.size, size=n, replace=False)
    g_fd = np.empty(n)
    for k, i in enumerate(idx):
        xp = flat.copy()
        xp[i] += h
        xm = flat.copy()
        xm[i] -= h
        fp = f(torch.tensor(xp.reshape(x0.shape))).item()
        fm = f(torch.tensor(xm.reshape(x0.shape))).item()
        g_fd[k] = (fp - fm) / (2.0 * h)
    scale = max(np.abs(g_fd).max(), 1e-9)
    return float(np.abs(g_an[idx] - g_fd).max() / scale), n


def _probe_rig(n_views: int = 4):
    """Small calibrated orbit used by the triangulation checks."""
    target = np.array([0.0, 0.0, 900.0])
    views = []
    for i in range(n_views):
        a = 2.0 * np.pi * i / n_views + 0.4
        pos = target + np.array([2800.0 * np.cos(a), 2800.0 * np.sin(a), 400.0])
        views.append(camera_look_at(pos, target, up=(0.0, 0.0, 1.0), focal=140.0,
                                    center=(64.0, 64.0), image_size=(128, 128)))
    K = torch.tensor(np.stack([v.K for v in views]), dtype=torch.float64)
    E = torch.tensor(np.stack([v.E for v in views]), dtype=torch.float64)
    return K, E


def run_gradient_suite(n_probes: int = DEFAULT_PROBES, tol: float = REL_TOL,
                       seed: int = 0) -> list[GradCheckRow]:
    """Probe every differentiable operation; returns one row per check."""
    rng = np.random.default_rng(seed)
    torch.manual_seed(seed)
    topo = puppet_topology()
    J = topo.n_joints
    size = (24, 24)
    sigma = 2.0
    raster_w = torch.tensor(rng.normal(size=size))
    rows: list[GradCheckRow] = []

    def add(name, f, x0):
        t0 = time.time()
        err, n = probe_gradient(f, x0, n_probes, rng)
        rows.append(GradCheckRow(name, n, err, tol, time.time() - t0))

    # rasterizers: scalar = render weighted by a fixed random image, which
    # makes the gradient generic instead of symmetric-cancelling
    seg = rng.uniform(4.0, 20.0, size=(16, 2, 2))
    add("bone_mask",
        lambda x: (bone_mask(x, (0, 1), sigma, size) * raster_w).sum(), seg)

    pose2d = rng.uniform(4.0, 20.0, size=(1, J, 2))
    add("skeleton_mask",
        lambda x: (skeleton_mask(x, topo, sigma, size) * raster_w).sum(), pose2d)
    add("gaussian_baseline_mask",
        lambda x: (gaussian_baseline_mask(x, sigma, size) * raster_w).sum(), pose2d)

    # losses against a fixed detached target rendered from a different pose
    target2d = torch.tensor(rng.uniform(4.0, 20.0, size=(1, J, 2)))
    gt = skeleton_mask(target2d, topo, sigma, size).detach()
    add("skeleton_loss",
        lambda x: skeleton_loss(gt, x, topo, sigma), pose2d)
    wmap = torch.tensor(rng.uniform(1.0, 3.0, size=size))
    add("skeleton_loss_weighted",
        lambda x: skeleton_loss(gt, x, topo, sigma, weight=wmap), pose2d)

    spn = ShapePriorNet(base_width=4, groups=4).double()
    spn.eval()
    add("physique_loss",
        lambda x: physique_loss(gt, x, topo, sigma, spn), pose2d)

    # integral readout over a small heatmap volume
    logits = rng.normal(size=(1, 3, 4, 6, 6))
    coef = torch.tensor(rng.normal(size=(1, 3, 3)))
    add("integral_readout",
        lambda x: (integral_readout(volume_softmax(x), size, (2000.0, 4000.0))
                   * coef).sum(), logits)

    # triangulation from exact projections of a small point cloud
    K, E = _probe_rig()
    X = torch.tensor(rng.normal(scale=400.0, size=(1, 6, 3))
                     + np.array([0.0, 0.0, 900.0]))
    obs = project_points(X.expand(4, -1, -1, -1), (K @ E)[:, None]).numpy()
    coef3 = torch.tensor(rng.normal(size=(1, 6, 3)))
    add("triangulation",
        lambda x: (triangulate_points(x, K, E) * coef3).sum(), obs)

    # the full consistency loop: triangulate, reproject, render, compare
    pose3d = torch.tensor(rng.normal(scale=260.0, size=(1, J, 3))
                          + np.array([0.0, 0.0, 900.0]))
    obs_pose = project_points(pose3d.expand(4, -1, -1, -1), (K @ E)[:, None])
    scale = 24.0 / 128.0
    Ks = K.clone()
    Ks[:, :2] *= scale
    kpts0 = (obs_pose * scale).numpy()
    masks_mv = skeleton_mask(torch.tensor(kpts0), topo, sigma, size).detach()
    # probe away from the consistency minimum, where the gradient vanishes
    # and the relative comparison would be noise against noise
    kpts_off = kpts0 + rng.uniform(-1.0, 1.0, size=kpts0.shape)
    add("multiview_consistency",
        lambda x: multiview_consistency_loss(masks_mv, x, Ks, E, topo, sigma,
                                             LossWeights(1.0, 0.0)), kpts_off)
    return rows


def format_rows(rows: list[GradCheckRow]) -> str:
    """Fixed-width pass/fail table for terminal output."""
    name_w = max(len(r.name) for r in rows)
    lines = [f"{'check':<{name_w}}  probes   rel err      tol   status"]
    for r in rows:
        status = "ok" if r.ok else "FAIL"
        lines.append(f"{r.name:<{name_w}}  {r.n_probes:>6}  {r.rel_err:8.1e}  "
                     f"{r.tol:7.0e}   {status}")
    return "\n".join(lines)
