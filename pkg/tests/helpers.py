"""Shared fixtures: random rigs, poses, and rotations for the test suite."""

from __future__ import annotations

import numpy as np

from maskpose.geometry import CameraView, MultiViewRig, camera_look_at


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniform random rotation matrix (QR of a Gaussian, sign-fixed)."""
    A = rng.normal(size=(3, 3))
    Q, R = np.linalg.qr(A)
    Q = Q * np.sign(np.diag(R))
    if np.linalg.det(Q) < 0:
        Q[:, 2] *= -1
    return Q


def orbit_rig(n_views: int = 4, radius: float = 3000.0, height: float = 500.0,
              focal: float = 140.0, image_size=(128, 128), target=(0.0, 0.0, 900.0),
              phase: float = 0.0) -> MultiViewRig:
    """Cameras on a horizontal circle around ``target``, all looking inward."""
    target = np.asarray(target, dtype=np.float64)
    views = []
    for i in range(n_views):
        a = phase + 2.0 * np.pi * i / n_views
        pos = target + np.array([radius * np.cos(a), radius * np.sin(a), height])
        views.append(camera_look_at(pos, target, up=(0.0, 0.0, 1.0), focal=focal,
                                    center=(image_size[0] / 2.0, image_size[1] / 2.0),
                                    image_size=image_size))
    return MultiViewRig(views=tuple(views))


def random_pose(rng: np.random.Generator, n_joints: int = 18, spread: float = 600.0,
                center=(0.0, 0.0, 900.0)) -> np.ndarray:
    """Cloud of joints around ``center``, roughly body-sized in mm."""
    return np.asarray(center) + rng.normal(scale=spread, size=(n_joints, 3))


def transform_view(view: CameraView, R: np.ndarray, t: np.ndarray) -> CameraView:
    """Re-express a camera after the world moves by X -> R X + t."""
    Rc = view.E[:, :3]
    tc = view.E[:, 3]
    E = np.concatenate([Rc @ R.T, (tc - Rc @ R.T @ t)[:, None]], axis=1)
    return CameraView(K=view.K, E=E, image_size=view.image_size)


def assert_grad_matches_fd(f, x0: np.ndarray, h: float = 1e-3, rel: float = 1e-3):
    """Autograd vs central finite differences on every coordinate of x0.

    The comparison is inf-norm relative: max|g_an - g_fd| / max|g_fd|, which
    avoids blowing up on individual near-zero partials.
    """
    import torch

    xt = torch.tensor(x0, dtype=torch.float64, requires_grad=True)
    y = f(xt)
    y.backward()
    g_an = xt.grad.numpy()
    g_fd = np.zeros_like(x0, dtype=np.float64)
    it = np.nditer(x0, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        xp = x0.copy()
        xp[idx] += h
        xm = x0.copy()
        xm[idx] -= h
        fp = f(torch.tensor(xp, dtype=torch.float64)).item()
        fm = f(torch.tensor(xm, dtype=torch.float64)).item()
        g_fd[idx] = (fp - fm) / (2 * h)
    scale = max(np.abs(g_fd).max(), 1e-9)
    err = np.abs(g_an - g_fd).max() / scale
    assert err <= rel, f"gradient relative error {err:.3e} exceeds {rel}"
    return err
