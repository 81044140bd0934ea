"""Scikit-learn style facade over the mask-supervised trainer.

The underlying pipeline is directory-driven: datasets live on disk, runs
write checkpoints. MaskPoseEstimator hides that behind fit/predict on mask
stacks held in memory. fit stages the arrays into a temporary dataset
directory, runs the trainer, and keeps the detector for prediction; the
staging area is deleted afterwards unless a work_dir is given. Ground
truth is optional at fit time (training is unsupervised); when provided it
only feeds the trainer's progress metrics.
"""

from __future__ import annotations

import json
import shutil
import tempfile
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .config import TrainConfig
from .data import downsample_masks
from .evaluate import predict_views, triangulated_poses
from .geometry import MultiViewRig, save_rig
from .metrics import mpjpe, root_centered
from .models import load_checkpoint, restore_models
from .puppet import DATASET_FORMAT, puppet_topology
from .training import fit as run_training
from .validation import as_float_array, check_finite, check_mask_stack


def project_world_joints(y: np.ndarray, rig: MultiViewRig) -> np.ndarray:
    """Pixel projections (N, V, J, 2) of world joints (N, J, 3)."""
    N, J, _ = y.shape
    Xh = np.concatenate([y, np.ones((N, J, 1))], axis=-1)
    out = np.empty((N, rig.n_views, J, 2))
    for v, view in enumerate(rig.views):
        uvw = Xh @ view.P.T
        out[:, v] = uvw[..., :2] / uvw[..., 2:]
    return out


class MaskPoseEstimator(BaseEstimator):
    """Unsupervised multi-view 3D pose estimator trained on silhouette masks.

    fit(X, rig=...) expects X as an (n_samples, n_views, H, W) stack of
    binary masks matching the rig's image size; y is an optional
    (n_samples, n_joints, 3) ground truth used only for progress metrics.
    predict returns triangulated world poses (n_samples, n_joints, 3) in mm
    and score returns negative root-centered MPJPE, so higher is better.
    """

    def __init__(self, steps: int = 2000, batch_samples: int = 4,
                 lr: float = 1e-3, render_resolution: int = 64,
                 sigma_px: float | None = None, depth_bins: int = 16,
                 depth_range: tuple = (2000.0, 4000.0),
                 detector_widths: tuple = (32, 48, 96, 128),
                 detector_groups: int = 8, spn_width: int = 16,
                 spn_groups: int = 4, multiview: bool = True,
                 use_spn: bool = True, use_geodesic: bool = True,
                 cascade: bool = True, lambda_s: float = 1.0,
                 lambda_p_end: float = 1.0,
                 stage_max_steps: tuple = (4000, 4000),
                 eval_fraction: float = 0.1, seed: int = 0,
                 work_dir=None, verbose: bool = False):
        self.steps = steps
        self.batch_samples = batch_samples
        self.lr = lr
        self.render_resolution = render_resolution
        self.sigma_px = sigma_px
        self.depth_bins = depth_bins
        self.depth_range = depth_range
        self.detector_widths = detector_widths
        self.detector_groups = detector_groups
        self.spn_width = spn_width
        self.spn_groups = spn_groups
        self.multiview = multiview
        self.use_spn = use_spn
        self.use_geodesic = use_geodesic
        self.cascade = cascade
        self.lambda_s = lambda_s
        self.lambda_p_end = lambda_p_end
        self.stage_max_steps = stage_max_steps
        self.eval_fraction = eval_fraction
        self.seed = seed
        self.work_dir = work_dir
        self.verbose = verbose

    def _train_config(self, data_dir: Path, run_dir: Path) -> TrainConfig:
        return TrainConfig(
            dataset_dir=str(data_dir), out_dir=str(run_dir), seed=self.seed,
            steps=self.steps, batch_samples=self.batch_samples,
            lr_detector=self.lr, lr_spn=self.lr,
            render_resolution=self.render_resolution, sigma_px=self.sigma_px,
            depth_bins=self.depth_bins, depth_range=self.depth_range,
            detector_widths=self.detector_widths,
            detector_groups=self.detector_groups, spn_width=self.spn_width,
            spn_groups=self.spn_groups, multiview=self.multiview,
            use_spn=self.use_spn, use_geodesic=self.use_geodesic,
            cascade=self.cascade, lambda_s=self.lambda_s,
            lambda_p_end=self.lambda_p_end,
            stage_max_steps=self.stage_max_steps,
            eval_fraction=self.eval_fraction,
            eval_every=self.steps, checkpoint_every=self.steps)

    def _stage_dataset(self, root: Path, X: np.ndarray, y, rig: MultiViewRig,
                       topology) -> None:
        """Write the in-memory stack as a dataset directory the trainer reads.

        Masks are thresholded at 0.5 for the binary PNG encoding. Without y
        the ground-truth rows are zeros, which keeps the layout complete;
        the trainer only reads them for its progress metrics.
        """
        from PIL import Image

        N, V, H, W = X.shape
        J = topology.n_joints
        (root / "masks").mkdir(parents=True, exist_ok=True)
        (root / "gt").mkdir(exist_ok=True)
        save_rig(rig, root / "rig.json")
        gt3d = y if y is not None else np.zeros((N, J, 3))
        gt2d = (project_world_joints(y, rig) if y is not None
                else np.zeros((N, V, J, 2)))
        ids = []
        for i in range(N):
            sid = f"{i:06d}"
            mask_dir = root / "masks" / sid
            mask_dir.mkdir(exist_ok=True)
            for v in range(V):
                img = ((X[i, v] > 0.5).astype(np.uint8)) * 255
                Image.fromarray(img, mode="L").save(mask_dir / f"{v}.png")
            (root / "gt" / f"{sid}.json").write_text(json.dumps({
                "sample_id": sid,
                "joint_names": list(topology.joint_names),
                "joints3d_mm": np.asarray(gt3d[i]).tolist(),
                "joints2d_px": np.asarray(gt2d[i]).tolist(),
            }, indent=2, sort_keys=True) + "\n")
            ids.append(sid)
        (root / "manifest.json").write_text(json.dumps({
            "format": DATASET_FORMAT,
            "n_samples": N,
            "n_views": V,
            "image_size": [W, H],
            "source": "in-memory estimator staging",
            "samples": ids,
        }, indent=2, sort_keys=True) + "\n")

    def fit(self, X, y=None, rig: MultiViewRig | None = None):
        """Train the detector on a mask stack; returns self."""
        if rig is None:
            raise ValueError("fit requires a calibrated rig (rig=MultiViewRig(...))")
        X = check_mask_stack(X, rig.n_views)
        N, V, H, W = X.shape
        topology = puppet_topology()
        for v, view in enumerate(rig.views):
            if view.image_size != (W, H):
                raise ValueError(
                    f"view {v} expects image size {view.image_size}, masks are {(W, H)}")
        if y is not None:
            y = as_float_array(y, "y", shape=(N, topology.n_joints, 3))
            check_finite(y, "y")
        split = max(2, round(1.0 / self.eval_fraction))
        if N < split:
            raise ValueError(
                f"need at least {split} samples at eval_fraction {self.eval_fraction}")

        stage = Path(self.work_dir) if self.work_dir is not None else Path(
            tempfile.mkdtemp(prefix="maskpose-fit-"))
        cleanup = self.work_dir is None
        try:
            data_dir, run_dir = stage / "data", stage / "run"
            self._stage_dataset(data_dir, X, y, rig, topology)
            summary = run_training(self._train_config(data_dir, run_dir),
                                   resume=False, verbose=self.verbose)
            doc = load_checkpoint(summary["checkpoint"])
            detector, spn = restore_models(doc)
        finally:
            if cleanup:
                shutil.rmtree(stage, ignore_errors=True)

        detector.eval()
        self.detector_ = detector
        self.spn_ = spn
        self.rig_ = rig
        self.n_views_ = V
        self.image_size_ = (W, H)
        self.n_joints_ = topology.n_joints
        self.root_index_ = topology.root_index
        self.work_dir_ = None if cleanup else str(stage)
        self.train_summary_ = (
            {"step": summary["step"],
             "mpjpe_triangulated_mm": summary["mpjpe_triangulated_mm"]}
            if y is not None else None)
        return self

    def _check_fitted(self) -> None:
        if not hasattr(self, "detector_"):
            raise NotFittedError(
                "this MaskPoseEstimator instance is not fitted yet; call fit first")

    def predict(self, X) -> np.ndarray:
        """Triangulated world poses (n_samples, n_joints, 3) in mm."""
        self._check_fitted()
        X = check_mask_stack(X, self.n_views_)
        H, W = X.shape[2], X.shape[3]
        if (W, H) != self.image_size_:
            raise ValueError(
                f"masks are {(W, H)}, the estimator was fitted at {self.image_size_}")
        R = self.detector_.cfg.input_size[0]
        masks = downsample_masks(X, W // R)
        pred2d, _ = predict_views(self.detector_, masks)
        return triangulated_poses(pred2d * (W / R), self.rig_)

    def score(self, X, y) -> float:
        """Negative root-centered MPJPE in mm (higher is better)."""
        pred = self.predict(X)
        y = as_float_array(y, "y", shape=pred.shape)
        return -mpjpe(root_centered(pred, self.root_index_),
                      root_centered(y, self.root_index_))
