"""Procedural multi-view puppet dataset.

Samples articulated 18-joint skeletons by forward kinematics, renders binary
silhouettes per calibrated camera from bone capsules plus a head ellipsoid,
and writes the on-disk layout the training and evaluation tools consume:
masks/<sample>/<view>.png, gt/<sample>.json, rig.json, manifest.json.
Real-dataset masks from any extractor can be dropped into the same layout.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import DataError, DegenerateGeometryError
from .geometry import (ARMS_HANDS, CORE, CameraView, Keypoints3D, MultiViewRig,
                       SkeletonTopology, camera_look_at, project, save_rig)
from .rendering import pixel_grid, point_segment_distance

DATASET_FORMAT = "maskpose-dataset-v1"

JOINT_NAMES = (
    "pelvis", "spine", "thorax", "neck", "head", "head_top",
    "l_shoulder", "l_elbow", "l_wrist", "r_shoulder", "r_elbow", "r_wrist",
    "l_hip", "l_knee", "l_ankle", "r_hip", "r_knee", "r_ankle",
)

# (parent, child), rest length mm, capsule radius mm, cascade group
_BONE_TABLE = (
    ((0, 1), 250.0, 95.0, CORE),    # pelvis - spine
    ((1, 2), 250.0, 95.0, CORE),    # spine - thorax
    ((2, 3), 120.0, 45.0, CORE),    # thorax - neck
    ((3, 4), 110.0, 45.0, CORE),    # neck - head
    ((4, 5), 130.0, 55.0, CORE),    # head - head top
    ((2, 6), 180.0, 55.0, CORE),    # clavicles
    ((2, 9), 180.0, 55.0, CORE),
    ((0, 12), 110.0, 70.0, CORE),   # pelvis - hips
    ((0, 15), 110.0, 70.0, CORE),
    ((12, 13), 450.0, 60.0, CORE),  # thighs
    ((15, 16), 450.0, 60.0, CORE),
    ((13, 14), 430.0, 48.0, CORE),  # shins
    ((16, 17), 430.0, 48.0, CORE),
    ((6, 7), 280.0, 42.0, ARMS_HANDS),   # upper arms
    ((9, 10), 280.0, 42.0, ARMS_HANDS),
    ((7, 8), 250.0, 36.0, ARMS_HANDS),   # forearms
    ((10, 11), 250.0, 36.0, ARMS_HANDS),
)

LR_PAIRS = ((6, 9), (7, 10), (8, 11), (12, 15), (13, 16), (14, 17))

# sampled joint angles, in rng draw order, with limits in radians
_ANGLE_LIMITS = {
    "l_shoulder_swing": (math.radians(-70), math.radians(70)),
    "l_shoulder_lift": (math.radians(-70), math.radians(70)),
    "l_elbow": (0.0, math.radians(130)),
    "r_shoulder_swing": (math.radians(-70), math.radians(70)),
    "r_shoulder_lift": (math.radians(-70), math.radians(70)),
    "r_elbow": (0.0, math.radians(130)),
    "l_hip_flex": (math.radians(-40), math.radians(80)),
    "l_hip_abduct": (math.radians(-15), math.radians(30)),
    "l_knee": (0.0, math.radians(120)),
    "r_hip_flex": (math.radians(-40), math.radians(80)),
    "r_hip_abduct": (math.radians(-15), math.radians(30)),
    "r_knee": (0.0, math.radians(120)),
}


def puppet_topology() -> SkeletonTopology:
    """The fixed 18-joint, 17-bone body used by the generator."""
    return SkeletonTopology(
        n_joints=18,
        bones=tuple(b for b, _, _, _ in _BONE_TABLE),
        bone_group=tuple(g for _, _, _, g in _BONE_TABLE),
        lr_pairs=LR_PAIRS,
        joint_names=JOINT_NAMES,
        root_index=0,
    )


@dataclass(frozen=True)
class PuppetSpec:
    """Body model: topology, rest lengths, capsule radii, head ellipsoid,
    joint angle limits, and root placement for sampling."""

    topology: SkeletonTopology
    bone_lengths: tuple[float, ...]
    capsule_radii: tuple[float, ...]
    head_ellipsoid: tuple[float, float] = (125.0, 85.0)
    head_joints: tuple[int, int] | None = (4, 5)
    angle_limits: dict[str, tuple[float, float]] = field(default_factory=dict)
    root_center: tuple[float, float, float] = (0.0, 0.0, 880.0)
    root_jitter: float = 150.0

    def __post_init__(self):
        nb = self.topology.n_bones
        if len(self.bone_lengths) != nb or len(self.capsule_radii) != nb:
            raise ValueError("bone_lengths and capsule_radii must have one entry per bone")
        if min(self.bone_lengths) <= 0 or min(self.capsule_radii) <= 0:
            raise ValueError("bone lengths and capsule radii must be positive")
        a, b = self.head_ellipsoid
        if a <= 0 or b <= 0:
            raise ValueError("head ellipsoid radii must be positive")
        if self.head_joints is not None:
            hi, hj = self.head_joints
            if not (0 <= hi < self.topology.n_joints and 0 <= hj < self.topology.n_joints):
                raise ValueError("head_joints out of range")
        for name, (lo, hi) in self.angle_limits.items():
            if lo > hi:
                raise ValueError(f"angle limit for {name} is empty: ({lo}, {hi})")
        if self.root_jitter < 0:
            raise ValueError("root_jitter must be nonnegative")

    def bone_length(self, bone: tuple[int, int]) -> float:
        return self.bone_lengths[self.topology.bones.index(tuple(bone))]


def default_puppet_spec() -> PuppetSpec:
    return PuppetSpec(
        topology=puppet_topology(),
        bone_lengths=tuple(l for _, l, _, _ in _BONE_TABLE),
        capsule_radii=tuple(r for _, _, r, _ in _BONE_TABLE),
        angle_limits=dict(_ANGLE_LIMITS),
    )


def default_rig(n_views: int = 4, distance: float = 3000.0, elevation_deg: float = 10.0,
                focal: float = 140.0, image_size=(128, 128),
                target=(0.0, 0.0, 900.0)) -> MultiViewRig:
    """Evenly spaced orbit of cameras looking at the puppet volume."""
    target = np.asarray(target, dtype=np.float64)
    el = math.radians(elevation_deg)
    center = (image_size[0] / 2.0, image_size[1] / 2.0)
    views = []
    for v in range(n_views):
        az = 2.0 * math.pi * v / n_views
        offset = distance * np.array([math.cos(el) * math.cos(az),
                                      math.cos(el) * math.sin(az),
                                      math.sin(el)])
        views.append(camera_look_at(target + offset, target, (0.0, 0.0, 1.0),
                                    focal, center, image_size))
    return MultiViewRig(tuple(views))


# ---------------------------------------------------------------------------
# forward kinematics
# ---------------------------------------------------------------------------


def _rx(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def _ry(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def _rz(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def forward_kinematics(spec: PuppetSpec, angles=None, yaw: float = 0.0,
                       root_position=None) -> np.ndarray:
    """Joint positions (18, 3) in mm for the given joint angles.

    Zero angles give the canonical T-pose: z up, facing +x, left side at +y,
    arms straight out along +-y. Limbs on the right are the y-mirror of the
    left-side construction, applied to that side's own angles.
    """
    ang = {name: 0.0 for name in _ANGLE_LIMITS}
    for name, val in (angles or {}).items():
        if name not in ang:
            raise ValueError(f"unknown joint angle {name!r}")
        ang[name] = float(val)
    L = spec.bone_length
    X = np.zeros((18, 3))
    X[1] = X[0] + (0, 0, L((0, 1)))                     # spine
    X[2] = X[1] + (0, 0, L((1, 2)))                     # thorax
    X[3] = X[2] + (0, 0, L((2, 3)))                     # neck
    X[4] = X[3] + (0, 0, L((3, 4)))                     # head
    X[5] = X[4] + (0, 0, L((4, 5)))                     # head top

    for prefix, sh, el, wr, clav_bone in (("l", 6, 7, 8, (2, 6)),
                                          ("r", 9, 10, 11, (2, 9))):
        mirror = np.array([1.0, 1.0 if prefix == "l" else -1.0, 1.0])
        R_sh = _rz(ang[f"{prefix}_shoulder_swing"]) @ _rx(ang[f"{prefix}_shoulder_lift"])
        X[sh] = X[2] + mirror * (0, L(clav_bone), 0)
        X[el] = X[sh] + mirror * (R_sh @ (0, L((sh, el)), 0))
        fore = R_sh @ _rx(ang[f"{prefix}_elbow"]) @ (0, L((el, wr)), 0)
        X[wr] = X[el] + mirror * fore

    for prefix, hp, kn, an, hip_bone in (("l", 12, 13, 14, (0, 12)),
                                         ("r", 15, 16, 17, (0, 15))):
        mirror = np.array([1.0, 1.0 if prefix == "l" else -1.0, 1.0])
        R_ab = _rx(ang[f"{prefix}_hip_abduct"])
        flex = ang[f"{prefix}_hip_flex"]
        X[hp] = X[0] + mirror * (0, L(hip_bone), 0)
        X[kn] = X[hp] + mirror * (R_ab @ _ry(-flex) @ (0, 0, -L((hp, kn))))
        shin = R_ab @ _ry(ang[f"{prefix}_knee"] - flex) @ (0, 0, -L((kn, an)))
        X[an] = X[kn] + mirror * shin

    root = np.asarray(spec.root_center if root_position is None else root_position,
                      dtype=np.float64)
    return X @ _rz(yaw).T + root


def sample_pose(rng: np.random.Generator, spec: PuppetSpec) -> Keypoints3D:
    """Random pose: uniform yaw, root jitter in the ground plane, and joint
    angles uniform within the spec's limits. Bone lengths are exact."""
    yaw = rng.uniform(-math.pi, math.pi)
    jitter = rng.uniform(-spec.root_jitter, spec.root_jitter, size=2)
    angles = {name: rng.uniform(lo, hi) for name, (lo, hi) in spec.angle_limits.items()}
    root = np.asarray(spec.root_center) + (jitter[0], jitter[1], 0.0)
    coords = forward_kinematics(spec, angles, yaw=yaw, root_position=root)
    return Keypoints3D(coords, joint_names=spec.topology.joint_names)


# ---------------------------------------------------------------------------
# silhouette rendering
# ---------------------------------------------------------------------------


def _depths(X: np.ndarray, view: CameraView) -> np.ndarray:
    return X @ view.E[2, :3] + view.E[2, 3]


def _project_px(X: np.ndarray, view: CameraView) -> np.ndarray:
    h = X @ view.P[:, :3].T + view.P[:, 3]
    return h[..., :2] / h[..., 2:]


def _capsules_footprint(X: np.ndarray, bones, radii, view: CameraView) -> np.ndarray:
    """Union of projected capsule footprints as a bool (H, W) raster.

    A pixel is foreground when its distance to a bone's projected segment is
    at most the capsule radius scaled by focal/depth at the closest point
    (depth along the segment interpolated projectively).
    """
    z = _depths(X, view)
    if np.any(z <= 0):
        raise DegenerateGeometryError("puppet is not fully in front of the camera")
    px = _project_px(X, view)
    idx = np.asarray(bones)
    a = torch.as_tensor(px[idx[:, 0]], dtype=torch.float64)
    b = torch.as_tensor(px[idx[:, 1]], dtype=torch.float64)
    za = torch.as_tensor(z[idx[:, 0]], dtype=torch.float64)
    zb = torch.as_tensor(z[idx[:, 1]], dtype=torch.float64)
    W, H = view.image_size
    grid = pixel_grid((H, W), dtype=torch.float64).unsqueeze(2)  # (H, W, 1, 2)
    dist, t = point_segment_distance(grid, a, b)
    inv_z = (1.0 - t) / za + t / zb
    focal = 0.5 * (view.K[0, 0] + view.K[1, 1])
    r_px = torch.as_tensor(np.asarray(radii, dtype=np.float64)) * focal * inv_z
    return (dist <= r_px).any(dim=-1).numpy()


def capsule_mask(a, b, radius: float, view: CameraView) -> np.ndarray:
    """Bool (H, W) footprint of a single 3D capsule."""
    X = np.stack([np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)])
    return _capsules_footprint(X, [(0, 1)], [radius], view)


def ellipsoid_mask(center, axis, radii: tuple[float, float], view: CameraView) -> np.ndarray:
    """Bool (H, W) footprint of a spheroid: semi-axis radii[0] along ``axis``,
    radii[1] across it. Uses the image of the dual quadric, so the outline is
    the exact perspective silhouette."""
    c = np.asarray(center, dtype=np.float64)
    if (_depths(c[None], view) <= 0).any():
        raise DegenerateGeometryError("ellipsoid center is behind the camera")
    u = np.asarray(axis, dtype=np.float64)
    u = u / np.linalg.norm(u)
    a, b = radii
    M = np.outer(u, u) / a**2 + (np.eye(3) - np.outer(u, u)) / b**2
    Q = np.zeros((4, 4))
    Q[:3, :3] = M
    Q[:3, 3] = -M @ c
    Q[3, :3] = -M @ c
    Q[3, 3] = c @ M @ c - 1.0
    P = view.P
    conic = np.linalg.inv(P @ np.linalg.inv(Q) @ P.T)
    W, H = view.image_size
    g = pixel_grid((H, W), dtype=torch.float64).numpy()
    x = np.concatenate([g, np.ones((H, W, 1))], axis=-1)
    val = np.einsum("hwi,ij,hwj->hw", x, conic, x)
    center_px = np.concatenate([_project_px(c[None], view)[0], [1.0]])
    return val * (center_px @ conic @ center_px) > 0


def render_puppet_mask(kpts3d, view: CameraView, spec: PuppetSpec) -> np.ndarray:
    """Binary silhouette (H, W) uint8 in {0, 255} of the posed puppet."""
    X = kpts3d.coords if isinstance(kpts3d, Keypoints3D) else np.asarray(kpts3d, dtype=np.float64)
    if X.shape != (spec.topology.n_joints, 3):
        raise ValueError(f"expected ({spec.topology.n_joints}, 3) joints, got {X.shape}")
    fg = _capsules_footprint(X, spec.topology.bones, spec.capsule_radii, view)
    if spec.head_joints is not None:
        hi, hj = spec.head_joints
        centre = 0.5 * (X[hi] + X[hj])
        fg |= ellipsoid_mask(centre, X[hj] - X[hi], spec.head_ellipsoid, view)
    return fg.astype(np.uint8) * 255


def _dilate8(a: np.ndarray) -> np.ndarray:
    p = np.pad(a, 1)
    return (p[1:-1, 1:-1] | p[:-2, 1:-1] | p[2:, 1:-1] | p[1:-1, :-2] | p[1:-1, 2:]
            | p[:-2, :-2] | p[:-2, 2:] | p[2:, :-2] | p[2:, 2:])


def mask_is_connected(mask: np.ndarray) -> bool:
    """True when the foreground is nonempty and one 8-connected component."""
    m = np.asarray(mask) > 0
    total = int(m.sum())
    if total == 0:
        return False
    reach = np.zeros_like(m)
    r, c = np.argwhere(m)[0]
    reach[r, c] = True
    for _ in range(m.size):
        grown = _dilate8(reach) & m
        if int(grown.sum()) == int(reach.sum()):
            break
        reach = grown
    return int(reach.sum()) == total


# ---------------------------------------------------------------------------
# dataset writer
# ---------------------------------------------------------------------------


def spec_hash(spec: PuppetSpec) -> str:
    doc = {
        "joint_names": spec.topology.joint_names,
        "bones": spec.topology.bones,
        "bone_group": spec.topology.bone_group,
        "lr_pairs": spec.topology.lr_pairs,
        "root_index": spec.topology.root_index,
        "bone_lengths": spec.bone_lengths,
        "capsule_radii": spec.capsule_radii,
        "head_ellipsoid": spec.head_ellipsoid,
        "head_joints": spec.head_joints,
        "angle_limits": sorted(spec.angle_limits.items()),
        "root_center": spec.root_center,
        "root_jitter": spec.root_jitter,
    }
    return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()


def _write_json(path: Path, doc) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    os.replace(tmp, path)


def _pose_ok(masks, kpts2d, rig: MultiViewRig, margin: float) -> bool:
    for view, k2d in zip(rig.views, kpts2d):
        W, H = view.image_size
        x, y = k2d[:, 0], k2d[:, 1]
        if x.min() < margin or y.min() < margin or x.max() > W - margin or y.max() > H - margin:
            return False
    return all(mask_is_connected(m) for m in masks)


def _draw_sample(rng, spec, rig, allow_occlusion: bool, margin: float, max_attempts: int):
    for _ in range(max_attempts):
        pose = sample_pose(rng, spec)
        try:
            kpts2d = [project(pose, v).coords for v in rig.views]
            masks = [render_puppet_mask(pose, v, spec) for v in rig.views]
        except DegenerateGeometryError:
            continue
        if allow_occlusion or _pose_ok(masks, kpts2d, rig, margin):
            return pose, masks, kpts2d
    raise DataError(f"no acceptable pose after {max_attempts} attempts; "
                    "loosen the spec limits or pull the cameras back")


def make_dataset(out_dir, n_samples: int, seed: int, spec: PuppetSpec | None = None,
                 rig: MultiViewRig | None = None, allow_occlusion: bool = False,
                 margin_px: float = 6.0, max_attempts: int = 200) -> dict:
    """Write a dataset of rendered multi-view masks plus ground truth.

    Deterministic under (seed, spec, rig): regenerating into a fresh
    directory produces byte-identical files. By default poses are rejected
    until the puppet is fully in frame with margin and every view's mask is
    a single 8-connected blob; ``allow_occlusion`` skips that filter.
    Returns the manifest dict.
    """
    from PIL import Image

    if n_samples <= 0:
        raise ValueError("n_samples must be positive")
    spec = default_puppet_spec() if spec is None else spec
    rig = default_rig() if rig is None else rig
    out = Path(out_dir)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    (out / "gt").mkdir(exist_ok=True)
    save_rig(rig, out / "rig.json")
    rng = np.random.default_rng(seed)
    ids = []
    for i in range(n_samples):
        sid = f"{i:06d}"
        pose, masks, kpts2d = _draw_sample(rng, spec, rig, allow_occlusion,
                                           margin_px, max_attempts)
        mask_dir = out / "masks" / sid
        mask_dir.mkdir(exist_ok=True)
        for v, m in enumerate(masks):
            Image.fromarray(m, mode="L").save(mask_dir / f"{v}.png")
        _write_json(out / "gt" / f"{sid}.json", {
            "sample_id": sid,
            "joint_names": list(spec.topology.joint_names),
            "joints3d_mm": pose.coords.tolist(),
            "joints2d_px": [k.tolist() for k in kpts2d],
        })
        ids.append(sid)
    manifest = {
        "format": DATASET_FORMAT,
        "n_samples": n_samples,
        "n_views": rig.n_views,
        "seed": int(seed),
        "image_size": list(rig.views[0].image_size),
        "spec_hash": spec_hash(spec),
        "allow_occlusion": bool(allow_occlusion),
        "samples": ids,
    }
    _write_json(out / "manifest.json", manifest)
    return manifest
