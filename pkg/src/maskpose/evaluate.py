"""Checkpoint evaluation: batch prediction, metric reports, and the
supervised post-processing comparison mode.

The default protocol triangulates per-view 2D predictions into one world
pose per sample and scores it against the stored ground truth. Single-view
mode instead lifts each view's (x, y, depth) readout into that camera's
frame and scores every view separately, which is the honest way to report
the detector without cross-view information.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch

from .data import MaskDataset, downsample_masks, split_indices
from .errors import ConfigError, DataError
from .geometry import triangulate_points
from .metrics import (MetricReport, ambiguity_from_2d, mpjpe, mse2d, n_mpjpe,
                      p_mpjpe, pck_auc, root_centered, spp_apply, spp_fit)
from .models import PoseDetector, detector_forward, load_checkpoint, restore_models
from .puppet import puppet_topology


def load_mask_stack(dataset: MaskDataset, indices, resolution: int) -> np.ndarray:
    """(N, V, R, R) float32 mask stack downsampled to the detector raster."""
    W_img, H_img = dataset.image_size
    if W_img != H_img:
        raise DataError("evaluation expects square dataset images")
    if W_img % resolution != 0:
        raise ConfigError(
            f"detector resolution {resolution} must divide the image size {W_img}")
    factor = W_img // resolution
    out = np.empty((len(indices), dataset.n_views, resolution, resolution),
                   dtype=np.float32)
    for row, i in enumerate(indices):
        m = dataset.load_masks(i)
        out[row] = downsample_masks(m, factor) if factor > 1 else m
    return out


def predict_views(detector: PoseDetector, masks: np.ndarray,
                  chunk: int = 8) -> tuple[np.ndarray, np.ndarray]:
    """Detector readouts for every (sample, view) pair.

    masks: (N, V, R, R) in [0, 1]. Returns (pred2d, pred3d) float64 arrays of
    shapes (N, V, J, 2) and (N, V, J, 3); 2D is in detector-input pixels and
    the third 3D channel is metric depth.
    """
    N, V, R, _ = masks.shape
    was_training = detector.training
    detector.eval()
    out2, out3 = [], []
    with torch.no_grad():
        for lo in range(0, N, chunk):
            m = torch.as_tensor(masks[lo:lo + chunk], dtype=torch.float32)
            n = m.shape[0]
            inp = m.reshape(n * V, 1, R, R).expand(-1, 3, -1, -1)
            _, c3, c2 = detector_forward(detector, inp)
            out2.append(c2.reshape(n, V, -1, 2).double().numpy())
            out3.append(c3.reshape(n, V, -1, 3).double().numpy())
    if was_training:
        detector.train()
    return np.concatenate(out2), np.concatenate(out3)


def triangulated_poses(pred2d_px: np.ndarray, rig) -> np.ndarray:
    """World poses (N, J, 3) from per-view 2D predictions in image pixels."""
    K, E = rig.camera_tensors(torch.float64)
    obs = torch.as_tensor(pred2d_px, dtype=torch.float64).permute(1, 0, 2, 3)
    return triangulate_points(obs, K, E).numpy()


def single_view_poses(pred2d_px: np.ndarray, depth_mm: np.ndarray,
                      rig) -> np.ndarray:
    """Camera-frame poses (N, V, J, 3) from per-view (x, y, depth) readouts."""
    N, V, J, _ = pred2d_px.shape
    out = np.empty((N, V, J, 3))
    for v, view in enumerate(rig.views):
        Kinv = np.linalg.inv(view.K)
        uv1 = np.concatenate([pred2d_px[:, v], np.ones((N, J, 1))], axis=-1)
        rays = uv1 @ Kinv.T
        out[:, v] = rays * depth_mm[:, v][..., None]
    return out


def gt_camera_frame(gt3d: np.ndarray, rig) -> np.ndarray:
    """Ground truth (N, J, 3) expressed in every camera frame: (N, V, J, 3)."""
    N, J, _ = gt3d.shape
    Xh = np.concatenate([gt3d, np.ones((N, J, 1))], axis=-1)
    out = np.empty((N, rig.n_views, J, 3))
    for v, view in enumerate(rig.views):
        out[:, v] = Xh @ view.E.T
    return out


def evaluate_predictions(pred3d: np.ndarray, gt3d: np.ndarray,
                         pred2d_px: np.ndarray, gt2d_px: np.ndarray,
                         topology, image_size,
                         normalizer: str = "width") -> MetricReport:
    """Score 3D poses and per-view 2D predictions into one report.

    pred3d/gt3d: (N, J, 3) pose pairs (any shared frame); pred2d/gt2d:
    (N, V, J, 2) pixel predictions used for the 2D error and the ambiguity
    ratio. Root-centering is applied here.
    """
    pred3d = np.asarray(pred3d, dtype=np.float64)
    gt3d = np.asarray(gt3d, dtype=np.float64)
    pc = root_centered(pred3d, topology.root_index)
    gc = root_centered(gt3d, topology.root_index)
    pck, auc = pck_auc(pc, gc)
    J = topology.n_joints
    return MetricReport(
        mpjpe=mpjpe(pc, gc),
        n_mpjpe=n_mpjpe(pc, gc),
        p_mpjpe=p_mpjpe(pred3d, gt3d),
        mse2d=mse2d(pred2d_px.reshape(-1, J, 2), gt2d_px.reshape(-1, J, 2),
                    image_size, normalizer),
        pck=pck,
        auc=auc,
        ambiguity_ratio=ambiguity_from_2d(pred2d_px, gt2d_px, topology),
        n_samples=pred2d_px.shape[0],
    )


def _gt_arrays(dataset: MaskDataset, indices) -> tuple[np.ndarray, np.ndarray]:
    g3, g2 = [], []
    for i in indices:
        rec = dataset.load_record(i)
        g3.append(rec.joints3d)
        g2.append(rec.joints2d)
    return np.stack(g3), np.stack(g2)


def evaluate_checkpoint(checkpoint_path, dataset_dir, out_dir=None,
                        spp: str | None = None, single_view: bool = False,
                        eval_fraction: float | None = None,
                        normalizer: str = "width", chunk: int = 8) -> MetricReport:
    """Full evaluation of a trained checkpoint on a dataset's eval split.

    The split matches training: interleaved indices at the checkpoint's
    stored eval_fraction unless overridden. ``spp`` ("linear" or
    "two-layer") fits the supervised post-processing map on the training
    split's predictions and scores its output on the eval split; the 2D
    columns are unchanged by it. ``single_view`` scores each camera's own
    3D readout in that camera's frame instead of the triangulated pose.
    Writes report.json and report.csv into out_dir when given.
    """
    doc = load_checkpoint(checkpoint_path)
    detector, _ = restore_models(doc)
    dataset = MaskDataset(dataset_dir)
    topology = puppet_topology()
    if detector.cfg.n_joints != topology.n_joints:
        raise DataError(
            f"checkpoint predicts {detector.cfg.n_joints} joints, "
            f"expected {topology.n_joints}")
    if eval_fraction is None:
        eval_fraction = float((doc.get("config") or {}).get("eval_fraction", 0.1))
    train_idx, eval_idx = split_indices(len(dataset), eval_fraction)
    R = detector.cfg.input_size[0]
    W_img, _ = dataset.image_size
    scale = W_img / R

    masks = load_mask_stack(dataset, eval_idx, R)
    pred2d, pred3d_vol = predict_views(detector, masks, chunk)
    pred2d_px = pred2d * scale
    gt3d, gt2d = _gt_arrays(dataset, eval_idx)

    if single_view:
        poses = single_view_poses(pred2d_px, pred3d_vol[..., 2], dataset.rig)
        refs = gt_camera_frame(gt3d, dataset.rig)
    else:
        poses = triangulated_poses(pred2d_px, dataset.rig)
        refs = gt3d

    if spp is not None:
        tmasks = load_mask_stack(dataset, train_idx, R)
        t2d, t3d_vol = predict_views(detector, tmasks, chunk)
        t2d_px = t2d * scale
        tgt3d, _ = _gt_arrays(dataset, train_idx)
        if single_view:
            land = single_view_poses(t2d_px, t3d_vol[..., 2], dataset.rig)
            land = land.reshape(-1, topology.n_joints, 3)
            targets = gt_camera_frame(tgt3d, dataset.rig)
            targets = targets.reshape(-1, topology.n_joints, 3)
        else:
            land = triangulated_poses(t2d_px, dataset.rig)
            targets = tgt3d
        reg = spp_fit(land, targets, mode=spp)
        if single_view:
            flat = poses.reshape(-1, topology.n_joints, 3)
            poses = spp_apply(reg, flat).reshape(poses.shape)
        else:
            poses = spp_apply(reg, poses)

    if single_view:
        J = topology.n_joints
        poses = poses.reshape(-1, J, 3)
        refs = refs.reshape(-1, J, 3)
    report = evaluate_predictions(poses, refs, pred2d_px, gt2d, topology,
                                  dataset.image_size, normalizer)

    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        meta = {
            "checkpoint": str(checkpoint_path),
            "dataset": str(dataset_dir),
            "split": "eval",
            "n_samples": int(len(eval_idx)),
            "single_view": bool(single_view),
            "spp": spp,
            "report": report.as_dict(),
        }
        (out / "report.json").write_text(
            json.dumps(meta, indent=2, sort_keys=True) + "\n")
        (out / "report.csv").write_text(report.to_csv_row())
    return report
