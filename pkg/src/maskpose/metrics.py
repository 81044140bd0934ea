"""Pose error metrics, the left-right ambiguity ratio, and the supervised
post-processing regressor.

3D errors come in three alignment classes (none / optimal scale / full
similarity), 2D error is reported as a percentage of the image width, and
PCK/AUC follow the 150 mm convention. The ambiguity ratio counts, per
sample, in how many views the left-right-flipped prediction beats the
unflipped one.
"""

from __future__ import annotations

import csv
import io
import json
import warnings
from dataclasses import dataclass, fields

import numpy as np
import torch

from .geometry import Keypoints3D, SkeletonTopology, procrustes_align, scale_normalize

PCK_THRESHOLD_MM = 150.0
AUC_THRESHOLDS_MM = tuple(float(t) for t in range(0, 151, 5))


def _paired(pred, gt, name: str) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(pred, dtype=np.float64)
    g = np.asarray(gt, dtype=np.float64)
    if p.shape != g.shape:
        raise ValueError(f"{name}: shape mismatch {p.shape} vs {g.shape}")
    if p.ndim == 2:
        p, g = p[None], g[None]
    if p.ndim != 3:
        raise ValueError(f"{name}: expected (D, J, C) arrays, got shape {p.shape}")
    return p, g


def root_centered(points, root_index: int = 0) -> np.ndarray:
    """Subtract the root joint, per sample. Accepts (J, 3) or (D, J, 3)."""
    arr = np.asarray(points, dtype=np.float64)
    return arr - arr[..., root_index:root_index + 1, :]


def joint_errors(pred, gt) -> np.ndarray:
    """(D, J) per-joint Euclidean distances."""
    p, g = _paired(pred, gt, "joint_errors")
    return np.linalg.norm(p - g, axis=-1)


def mpjpe(pred, gt) -> float:
    """Mean per-joint position error, no alignment. Center inputs first."""
    return float(joint_errors(pred, gt).mean())


def n_mpjpe(pred, gt) -> float:
    """MPJPE after per-sample optimal scaling. Inputs must be root-centered."""
    p, g = _paired(pred, gt, "n_mpjpe")
    total = 0.0
    for i in range(p.shape[0]):
        scaled = scale_normalize(Keypoints3D(p[i]), Keypoints3D(g[i])).coords
        total += float(np.linalg.norm(scaled - g[i], axis=-1).mean())
    return total / p.shape[0]


def p_mpjpe(pred, gt) -> float:
    """MPJPE after per-sample similarity (Procrustes) alignment."""
    p, g = _paired(pred, gt, "p_mpjpe")
    total = 0.0
    for i in range(p.shape[0]):
        aligned = procrustes_align(Keypoints3D(p[i]), Keypoints3D(g[i])).coords
        total += float(np.linalg.norm(aligned - g[i], axis=-1).mean())
    return total / p.shape[0]


def mse2d(pred2d, gt2d, image_size, normalizer: str = "width") -> float:
    """Mean per-joint pixel error as a percentage of the image extent.

    ``normalizer`` picks the extent: width (default), height, or diagonal.
    """
    p, g = _paired(pred2d, gt2d, "mse2d")
    W, H = image_size
    extent = {"width": W, "height": H, "diagonal": float(np.hypot(W, H))}.get(normalizer)
    if extent is None:
        raise ValueError(f"unknown normalizer {normalizer!r}")
    err = np.linalg.norm(p - g, axis=-1).mean()
    return float(err / extent * 100.0)


def pck_auc(pred, gt, threshold_mm: float = PCK_THRESHOLD_MM,
            auc_thresholds=AUC_THRESHOLDS_MM) -> tuple[float, float]:
    """PCK percent at the threshold and mean PCK over the AUC grid."""
    if len(auc_thresholds) == 0:
        raise ValueError("auc_thresholds must not be empty")
    err = joint_errors(pred, gt)
    pck = float((err < threshold_mm).mean() * 100.0)
    auc = float(np.mean([(err < t).mean() * 100.0 for t in auc_thresholds]))
    return pck, auc


# ---------------------------------------------------------------------------
# left-right ambiguity
# ---------------------------------------------------------------------------


def flip_keypoints(kpts, topology: SkeletonTopology) -> np.ndarray:
    """Left-right relabel: swap each lr pair, then mirror the first coordinate
    about the root joint's. Works for (..., J, 2) pixels and (..., J, 3) mm."""
    arr = np.array(kpts, dtype=np.float64)
    for l, r in topology.lr_pairs:
        arr[..., [l, r], :] = arr[..., [r, l], :]
    root_x = arr[..., topology.root_index:topology.root_index + 1, 0]
    arr[..., 0] = 2.0 * root_x - arr[..., 0]
    return arr


def ambiguity_ratio(errors, flipped_errors) -> float:
    """Fraction in [0, 0.5] from per-sample per-view errors (D, N).

    f_i counts the views where the flipped prediction has strictly lower
    error; each sample contributes min(f_i, N - f_i) / N.
    """
    e = np.asarray(errors, dtype=np.float64)
    ef = np.asarray(flipped_errors, dtype=np.float64)
    if e.shape != ef.shape or e.ndim != 2:
        raise ValueError(f"expected matching (D, N) error arrays, got {e.shape} vs {ef.shape}")
    D, N = e.shape
    if N == 0 or D == 0:
        raise ValueError("need at least one view and one sample")
    f = (ef < e).sum(axis=1)
    return float(np.minimum(f, N - f).sum() / (D * N))


def ambiguity_from_2d(pred2d, gt2d, topology: SkeletonTopology) -> float:
    """Ambiguity ratio from per-view 2D predictions, (D, N, J, 2) arrays."""
    p = np.asarray(pred2d, dtype=np.float64)
    g = np.asarray(gt2d, dtype=np.float64)
    if p.shape != g.shape or p.ndim != 4:
        raise ValueError(f"expected matching (D, N, J, 2) arrays, got {p.shape} vs {g.shape}")
    err = np.linalg.norm(p - g, axis=-1).mean(axis=-1)
    flipped = flip_keypoints(p, topology)
    err_f = np.linalg.norm(flipped - g, axis=-1).mean(axis=-1)
    return ambiguity_ratio(err, err_f)


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MetricReport:
    """One evaluation's numbers: 3D errors in mm, 2D error in percent."""

    mpjpe: float
    n_mpjpe: float
    p_mpjpe: float
    mse2d: float
    pck: float
    auc: float
    ambiguity_ratio: float
    n_samples: int

    def __post_init__(self):
        for name in ("pck", "auc"):
            v = getattr(self, name)
            if not 0.0 <= v <= 100.0:
                raise ValueError(f"{name} must be in [0, 100], got {v}")
        if not 0.0 <= self.ambiguity_ratio <= 0.5:
            raise ValueError(f"ambiguity_ratio must be in [0, 0.5], got {self.ambiguity_ratio}")
        if self.n_samples <= 0:
            raise ValueError("n_samples must be positive")

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def to_json(self) -> str:
        return json.dumps(self.as_dict(), indent=2, sort_keys=True) + "\n"

    def to_csv_row(self) -> str:
        """Header line plus one value row, for flat experiment tracking."""
        buf = io.StringIO()
        writer = csv.writer(buf)
        d = self.as_dict()
        writer.writerow(d.keys())
        writer.writerow(d.values())
        return buf.getvalue()


# ---------------------------------------------------------------------------
# supervised post-processing regressor
# ---------------------------------------------------------------------------


@dataclass
class SppRegressor:
    """Map from L predicted landmarks to J joints, fit on annotated samples.

    ``mode`` is "linear" (least squares on flattened coordinates, with bias)
    or "two-layer" (a small two-hidden-layer network).
    """

    mode: str
    n_landmarks: int
    n_joints: int
    weights: np.ndarray | None = None          # (3L + 1, 3J) for linear mode
    net_state: dict | None = None              # state dict for two-layer mode
    hidden: int = 256

    def __post_init__(self):
        if self.mode not in ("linear", "two-layer"):
            raise ValueError(f"unknown SPP mode {self.mode!r}")
        if self.n_landmarks < self.n_joints:
            raise ValueError("need at least as many landmarks as target joints")


def _flatten(points: np.ndarray, name: str) -> np.ndarray:
    arr = np.asarray(points, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[-1] != 3:
        raise ValueError(f"{name}: expected (D, n, 3), got {arr.shape}")
    return arr.reshape(arr.shape[0], -1)


def _two_layer_net(n_in: int, n_out: int, hidden: int) -> torch.nn.Sequential:
    return torch.nn.Sequential(
        torch.nn.Linear(n_in, hidden), torch.nn.GELU(),
        torch.nn.Linear(hidden, hidden), torch.nn.GELU(),
        torch.nn.Linear(hidden, n_out),
    )


def spp_fit(landmarks, joints, mode: str = "linear", hidden: int = 256,
            epochs: int = 300, lr: float = 1e-3, seed: int = 0) -> SppRegressor:
    """Fit the post-processing map on training-split pairs.

    landmarks: (D, L, 3) predictions; joints: (D, J, 3) annotations.
    """
    X = _flatten(landmarks, "landmarks")
    Y = _flatten(joints, "joints")
    if X.shape[0] != Y.shape[0]:
        raise ValueError("landmarks and joints must pair up sample for sample")
    L, J = X.shape[1] // 3, Y.shape[1] // 3
    reg = SppRegressor(mode=mode, n_landmarks=L, n_joints=J, hidden=hidden)
    if mode == "linear":
        A = np.concatenate([X, np.ones((X.shape[0], 1))], axis=1)
        if np.linalg.matrix_rank(A) < A.shape[1]:
            warnings.warn("SPP design matrix is rank deficient; solving with "
                          "a ridge term", RuntimeWarning)
            lam = 1e-6 * np.trace(A.T @ A) / A.shape[1]
            reg.weights = np.linalg.solve(A.T @ A + lam * np.eye(A.shape[1]), A.T @ Y)
        else:
            reg.weights, *_ = np.linalg.lstsq(A, Y, rcond=None)
        return reg
    torch.manual_seed(seed)
    net = _two_layer_net(X.shape[1], Y.shape[1], hidden).double()
    opt = torch.optim.Adam(net.parameters(), lr=lr)
    tx = torch.as_tensor(X)
    ty = torch.as_tensor(Y)
    for _ in range(epochs):
        opt.zero_grad()
        loss = torch.mean((net(tx) - ty) ** 2)
        loss.backward()
        opt.step()
    reg.net_state = {k: v.detach().clone() for k, v in net.state_dict().items()}
    return reg


def spp_apply(reg: SppRegressor, landmarks) -> np.ndarray:
    """(D, J, 3) joints for (D, L, 3) landmarks."""
    X = _flatten(landmarks, "landmarks")
    if X.shape[1] != 3 * reg.n_landmarks:
        raise ValueError(f"expected {reg.n_landmarks} landmarks, got {X.shape[1] // 3}")
    if reg.mode == "linear":
        if reg.weights is None:
            raise ValueError("regressor is not fit")
        A = np.concatenate([X, np.ones((X.shape[0], 1))], axis=1)
        Y = A @ reg.weights
    else:
        if reg.net_state is None:
            raise ValueError("regressor is not fit")
        net = _two_layer_net(3 * reg.n_landmarks, 3 * reg.n_joints, reg.hidden).double()
        net.load_state_dict(reg.net_state)
        with torch.no_grad():
            Y = net(torch.as_tensor(X)).numpy()
    return Y.reshape(X.shape[0], reg.n_joints, 3)
