"""Camera model, projection, triangulation, and rigid/similarity alignment.

Conventions used throughout the package:

* World and camera coordinates are in millimeters.
* ``E = [R | t]`` maps world to camera: ``X_cam = R @ X + t``; the camera
  looks down its +z axis, so visible points have positive depth.
* Pixel coordinates are continuous, x to the right and y down, with the
  center of raster cell ``(row i, col j)`` at ``(j + 0.5, i + 0.5)``.

Differentiable tensor kernels (`project_points`, `triangulate_points`) are
written in torch and shared with the training losses; the dataclass-level
functions wrap them with validation and numpy in/out.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import DataError, DegenerateGeometryError
from .validation import as_float_array, check_finite

CORE = "core"
ARMS_HANDS = "arms_hands"


# ---------------------------------------------------------------------------
# domain types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Keypoints3D:
    """J x 3 joint coordinates (mm) plus joint labels."""

    coords: np.ndarray
    joint_names: tuple[str, ...] | None = None

    def __post_init__(self):
        coords = as_float_array(self.coords, "coords", shape=(-1, 3))
        check_finite(coords, "coords")
        object.__setattr__(self, "coords", coords)
        if self.joint_names is not None and len(self.joint_names) != coords.shape[0]:
            raise ValueError("joint_names length does not match coords")

    @property
    def n_joints(self) -> int:
        return self.coords.shape[0]


@dataclass(frozen=True)
class Keypoints2D:
    """J x 2 pixel coordinates with optional per-joint visibility."""

    coords: np.ndarray
    visibility: np.ndarray | None = None

    def __post_init__(self):
        coords = as_float_array(self.coords, "coords", shape=(-1, 2))
        check_finite(coords, "coords")
        object.__setattr__(self, "coords", coords)
        if self.visibility is not None:
            vis = np.asarray(self.visibility, dtype=bool)
            if vis.shape != (coords.shape[0],):
                raise ValueError("visibility length does not match coords")
            object.__setattr__(self, "visibility", vis)

    @property
    def n_joints(self) -> int:
        return self.coords.shape[0]


@dataclass(frozen=True)
class SkeletonTopology:
    """Bone connectivity plus the tags the training cascade and metrics need.

    ``bones`` are (parent, child) joint index pairs; ``bone_group`` tags each
    bone as ``core`` or ``arms_hands``; ``lr_pairs`` lists (left, right) joint
    index pairs used for flip metrics; ``root_index`` is the centering joint.
    """

    n_joints: int
    bones: tuple[tuple[int, int], ...]
    bone_group: tuple[str, ...]
    lr_pairs: tuple[tuple[int, int], ...]
    joint_names: tuple[str, ...] | None = None
    root_index: int = 0

    def __post_init__(self):
        if len(self.bone_group) != len(self.bones):
            raise ValueError("bone_group length must match bones")
        seen = set()
        for i, j in self.bones:
            if i == j:
                raise ValueError(f"self-loop bone ({i}, {j})")
            if not (0 <= i < self.n_joints and 0 <= j < self.n_joints):
                raise ValueError(f"bone ({i}, {j}) out of range for {self.n_joints} joints")
        for tag in self.bone_group:
            if tag not in (CORE, ARMS_HANDS):
                raise ValueError(f"unknown bone group {tag!r}")
        for l, r in self.lr_pairs:
            if l == r or l in seen or r in seen:
                raise ValueError("lr_pairs must be disjoint")
            seen.update((l, r))
            if not (0 <= l < self.n_joints and 0 <= r < self.n_joints):
                raise ValueError("lr pair out of range")
        if not (0 <= self.root_index < self.n_joints):
            raise ValueError("root_index out of range")

    @property
    def n_bones(self) -> int:
        return len(self.bones)

    def bones_in_groups(self, groups) -> tuple[int, ...]:
        """Indices of bones whose tag is in ``groups``."""
        groups = set(groups)
        return tuple(b for b, g in enumerate(self.bone_group) if g in groups)


@dataclass(frozen=True)
class CameraView:
    """Pinhole camera: 3x3 intrinsics, 3x4 extrinsics, image size (W, H)."""

    K: np.ndarray
    E: np.ndarray
    image_size: tuple[int, int]

    def __post_init__(self):
        K = as_float_array(self.K, "K", shape=(3, 3))
        E = as_float_array(self.E, "E", shape=(3, 4))
        if K[0, 0] <= 0 or K[1, 1] <= 0:
            raise ValueError("K focal entries must be positive")
        if abs(K[1, 0]) > 1e-9 or abs(K[2, 0]) > 1e-9 or abs(K[2, 1]) > 1e-9:
            raise ValueError("K must be upper-triangular")
        R = E[:, :3]
        if not np.allclose(R @ R.T, np.eye(3), atol=1e-6):
            raise ValueError("rotation block of E is not orthonormal")
        object.__setattr__(self, "K", K)
        object.__setattr__(self, "E", E)
        w, h = self.image_size
        if w <= 0 or h <= 0:
            raise ValueError("image_size must be positive")
        object.__setattr__(self, "image_size", (int(w), int(h)))

    @property
    def P(self) -> np.ndarray:
        """Composed 3x4 projection K @ E."""
        return self.K @ self.E


@dataclass(frozen=True)
class MultiViewRig:
    """An ordered set of calibrated cameras."""

    views: tuple[CameraView, ...]
    units: str = "mm"

    def __post_init__(self):
        object.__setattr__(self, "views", tuple(self.views))

    @property
    def n_views(self) -> int:
        return len(self.views)

    def projection_tensor(self, dtype=torch.float32) -> torch.Tensor:
        """Stacked (n, 3, 4) projection matrices as a torch tensor."""
        return torch.as_tensor(np.stack([v.P for v in self.views]), dtype=dtype)

    def camera_tensors(self, dtype=torch.float32) -> tuple[torch.Tensor, torch.Tensor]:
        """Stacked intrinsics (n, 3, 3) and extrinsics (n, 3, 4) tensors."""
        K = torch.as_tensor(np.stack([v.K for v in self.views]), dtype=dtype)
        E = torch.as_tensor(np.stack([v.E for v in self.views]), dtype=dtype)
        return K, E


# ---------------------------------------------------------------------------
# differentiable tensor kernels
# ---------------------------------------------------------------------------


def project_points(X: torch.Tensor, P: torch.Tensor, min_depth: float | None = None) -> torch.Tensor:
    """Perspective-project world points with 3x4 matrices.

    X: (..., J, 3), P: broadcastable (..., 3, 4). With ``min_depth`` set the
    depth is clamped from below (training path); otherwise callers are
    expected to have checked depths.
    """
    Xh = torch.cat([X, torch.ones_like(X[..., :1])], dim=-1)
    proj = torch.einsum("...rc,...jc->...jr", P, Xh)
    z = proj[..., 2:3]
    if min_depth is not None:
        z = torch.clamp(z, min=min_depth)
    return proj[..., :2] / z


def point_depths(X: torch.Tensor, E: torch.Tensor) -> torch.Tensor:
    """Camera-frame depths of world points (..., J)."""
    Xh = torch.cat([X, torch.ones_like(X[..., :1])], dim=-1)
    return torch.einsum("...c,...jc->...j", E[..., 2, :], Xh)


def dlt_solve(obs: torch.Tensor, P: torch.Tensor, return_gap: bool = False):
    """Raw homogeneous least-squares solve of the stacked DLT system.

    obs: (n_views, ..., J, 2) observations, P: (n_views, 3, 4). Rows are
    normalized to unit length, then the smallest eigenvector of the 4x4
    normal matrix gives the point; differentiable end to end. Callers are
    expected to precondition coordinates (see triangulate_points).
    ``return_gap`` additionally yields the second-smallest eigenvalue per
    joint; a vanishing gap marks a system that does not pin down a point.
    """
    n = obs.shape[0]
    if P.shape[0] != n:
        raise ValueError("number of observations and projection matrices differ")
    if n < 2:
        raise DegenerateGeometryError("triangulation needs at least 2 views")
    shape = [n] + [1] * (obs.dim() - 3) + [1, 3, 4]
    Pb = P.reshape(shape)
    u = obs[..., 0:1, None]
    v = obs[..., 1:2, None]
    rows = torch.cat([u * Pb[..., 2:3, :] - Pb[..., 0:1, :],
                      v * Pb[..., 2:3, :] - Pb[..., 1:2, :]], dim=-2)
    rows = rows / torch.linalg.vector_norm(rows, dim=-1, keepdim=True).clamp_min(1e-12)
    A = rows.movedim(0, -3).flatten(-3, -2)  # (..., J, 2n, 4)
    M = A.transpose(-1, -2) @ A
    vals, vecs = torch.linalg.eigh(M)
    sol = vecs[..., :, 0]
    w = sol[..., 3:4]
    sign = torch.where(w >= 0, torch.ones_like(w), -torch.ones_like(w))
    sol = sol * sign
    pts = sol[..., :3] / sol[..., 3:4].clamp_min(1e-12)
    if return_gap:
        return pts, vals[..., 1]
    return pts


def default_world_scale(E: torch.Tensor) -> float:
    """Scene-scale guess from camera translation magnitudes."""
    return float(torch.linalg.vector_norm(E[..., :, 3], dim=-1).mean().clamp_min(1.0))


def triangulate_points(obs: torch.Tensor, K: torch.Tensor, E: torch.Tensor,
                       world_scale: float | None = None, return_gap: bool = False):
    """Preconditioned differentiable triangulation from pixel observations.

    obs: (n_views, ..., J, 2) pixels; K: (n_views, 3, 3); E: (n_views, 3, 4).
    Pixels are mapped to normalized camera coordinates with K^-1 and world
    coordinates are rescaled to O(1) before the homogeneous solve; without
    this, the algebraic least squares is badly scaled and noisy observations
    triangulate poorly. Returns (..., J, 3) in the original world units.
    """
    n = obs.shape[0]
    if K.shape[0] != n or E.shape[0] != n:
        raise ValueError("need one K and E per view")
    Kinv = torch.linalg.inv(K)
    ones = torch.ones_like(obs[..., :1])
    xh = torch.cat([obs, ones], dim=-1)
    shape = [n] + [1] * (obs.dim() - 3) + [3, 3]
    xn = torch.einsum("...rc,...jc->...jr", Kinv.reshape(shape), xh)
    xn = xn[..., :2] / xn[..., 2:3]
    s = default_world_scale(E) if world_scale is None else float(world_scale)
    Es = torch.cat([E[..., :, :3] * s, E[..., :, 3:]], dim=-1)
    out = dlt_solve(xn, Es, return_gap=return_gap)
    if return_gap:
        pts, gap = out
        return pts * s, gap
    return out * s


# ---------------------------------------------------------------------------
# dataclass-level operations
# ---------------------------------------------------------------------------


def project(points: Keypoints3D, view: CameraView) -> Keypoints2D:
    """Project 3D keypoints into a camera, erroring on non-positive depth."""
    X = points.coords
    cam = X @ view.E[:, :3].T + view.E[:, 3]
    bad = np.nonzero(cam[:, 2] <= 0)[0]
    if bad.size:
        raise DegenerateGeometryError(
            f"joint {int(bad[0])} has non-positive depth {cam[bad[0], 2]:.3f} in camera frame")
    pix = cam @ view.K.T
    return Keypoints2D(pix[:, :2] / pix[:, 2:3])


def triangulate_dlt(obs, rig: MultiViewRig) -> Keypoints3D:
    """Recover 3D joints from per-view 2D observations by DLT.

    ``obs`` is a sequence of Keypoints2D (one per rig view); joints marked
    invisible in a view are dropped from that view's equations. Each joint
    needs at least two contributing views.
    """
    if rig.n_views < 2 or len(obs) != rig.n_views:
        raise DegenerateGeometryError("triangulation needs one observation per view, >= 2 views")
    J = obs[0].n_joints
    coords = np.stack([o.coords for o in obs])  # (n, J, 2)
    vis = np.stack([
        o.visibility if o.visibility is not None else np.ones(J, dtype=bool) for o in obs
    ])
    # precondition: normalized camera coordinates, world rescaled to O(1)
    scale = max(float(np.mean([np.linalg.norm(v.E[:, 3]) for v in rig.views])), 1.0)
    Kinv = [np.linalg.inv(v.K) for v in rig.views]
    Es = []
    for v in rig.views:
        E = v.E.copy()
        E[:, :3] *= scale
        Es.append(E)
    out = np.empty((J, 3))
    for j in range(J):
        use = np.nonzero(vis[:, j])[0]
        if use.size < 2:
            raise DegenerateGeometryError(f"joint {j} is visible in fewer than 2 views")
        rows = []
        for i in use:
            h = Kinv[i] @ np.array([coords[i, j, 0], coords[i, j, 1], 1.0])
            u, v = h[0] / h[2], h[1] / h[2]
            rows.append(u * Es[i][2] - Es[i][0])
            rows.append(v * Es[i][2] - Es[i][1])
        A = np.stack(rows)
        A = A / np.maximum(np.linalg.norm(A, axis=1, keepdims=True), 1e-12)
        _, s, vt = np.linalg.svd(A)
        if s[-2] < 1e-9 * max(s[0], 1e-30):
            raise DegenerateGeometryError(
                f"joint {j}: triangulation system is rank deficient (coincident views?)")
        sol = vt[-1]
        if abs(sol[3]) < 1e-12:
            raise DegenerateGeometryError(f"joint {j}: triangulated point at infinity")
        out[j] = scale * sol[:3] / sol[3]
    return Keypoints3D(out, joint_names=getattr(obs[0], "joint_names", None))


def procrustes_align(pred: Keypoints3D, ref: Keypoints3D) -> Keypoints3D:
    """Similarity-align ``pred`` to ``ref`` (scale, rotation, translation).

    Classical orthogonal-Procrustes solution via SVD of the cross-covariance,
    with the determinant correction that keeps the rotation proper.
    """
    X = pred.coords
    Y = ref.coords
    if X.shape != Y.shape:
        raise ValueError("pred and ref must have the same number of joints")
    mu_x = X.mean(axis=0)
    mu_y = Y.mean(axis=0)
    Xc = X - mu_x
    Yc = Y - mu_y
    norm_y = np.linalg.norm(Yc)
    if norm_y < 1e-9:
        raise DegenerateGeometryError("reference pose is degenerate (all joints coincide)")
    var_x = (Xc ** 2).sum()
    if var_x < 1e-18:
        raise DegenerateGeometryError("pred pose is degenerate (all joints coincide)")
    C = Yc.T @ Xc / X.shape[0]
    U, s, Vt = np.linalg.svd(C)
    D = np.eye(3)
    if np.linalg.det(U @ Vt) < 0:
        D[2, 2] = -1
    R = U @ D @ Vt
    scale = (s * np.diag(D)).sum() * X.shape[0] / var_x
    aligned = scale * Xc @ R.T + mu_y
    return Keypoints3D(aligned, joint_names=pred.joint_names)


def scale_normalize(pred: Keypoints3D, ref: Keypoints3D) -> Keypoints3D:
    """Scale ``pred`` by the least-squares-optimal scalar toward ``ref``.

    Both inputs are expected to be root-centered.
    """
    X = pred.coords
    Y = ref.coords
    if X.shape != Y.shape:
        raise ValueError("pred and ref must have the same number of joints")
    denom = (X * X).sum()
    if denom < 1e-18:
        raise DegenerateGeometryError("pred pose has zero norm, cannot scale-normalize")
    s = (X * Y).sum() / denom
    return Keypoints3D(s * X, joint_names=pred.joint_names)


def camera_look_at(position, target, up, focal: float, center, image_size) -> CameraView:
    """Build a pinhole view at ``position`` looking toward ``target``.

    ``up`` picks the world direction that maps (approximately) to image -y.
    ``focal`` is in pixels, ``center`` the principal point (cx, cy).
    """
    position = as_float_array(position, "position", shape=(3,))
    target = as_float_array(target, "target", shape=(3,))
    up = as_float_array(up, "up", shape=(3,))
    fwd = target - position
    n = np.linalg.norm(fwd)
    if n < 1e-9:
        raise ValueError("camera position coincides with target")
    z = fwd / n
    x = np.cross(-up, z)  # camera y maps to world -up so image y grows downward
    nx = np.linalg.norm(x)
    if nx < 1e-9:
        raise ValueError("up direction is parallel to the view direction")
    x = x / nx
    y = np.cross(z, x)
    R = np.stack([x, y, z])
    t = -R @ position
    K = np.array([[focal, 0.0, center[0]], [0.0, focal, center[1]], [0.0, 0.0, 1.0]])
    return CameraView(K=K, E=np.concatenate([R, t[:, None]], axis=1), image_size=tuple(image_size))


# ---------------------------------------------------------------------------
# rig file IO
# ---------------------------------------------------------------------------


def save_rig(rig: MultiViewRig, path) -> None:
    """Write a rig as JSON: per-view row-major K (9), E (12), image_size."""
    doc = {
        "units": rig.units,
        "views": [
            {
                "K": [float(x) for x in v.K.reshape(-1)],
                "E": [float(x) for x in v.E.reshape(-1)],
                "image_size": list(v.image_size),
            }
            for v in rig.views
        ],
    }
    Path(path).write_text(json.dumps(doc, indent=2))


def load_rig(path) -> MultiViewRig:
    path = Path(path)
    if not path.exists():
        raise DataError(f"rig file not found: {path}")
    try:
        doc = json.loads(path.read_text())
        views = tuple(
            CameraView(
                K=np.array(v["K"], dtype=np.float64).reshape(3, 3),
                E=np.array(v["E"], dtype=np.float64).reshape(3, 4),
                image_size=tuple(v["image_size"]),
            )
            for v in doc["views"]
        )
        return MultiViewRig(views=views, units=doc.get("units", "mm"))
    except (KeyError, ValueError, json.JSONDecodeError) as exc:
        raise DataError(f"malformed rig file {path}: {exc}") from exc
