"""Static diagnostic panels for trained checkpoints.

Each visualized sample produces exactly five image files: the ground-truth
masks with the predicted 2D skeleton drawn on top, the rendered skeleton
mask, the shape prior network's physique mask, the geodesic weight map of
the ground-truth mask, and a combined 2D/3D pose plot against ground
truth. Views are tiled left to right inside every panel.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib
import numpy as np
import torch

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

from .data import MaskDataset, downsample_masks  # noqa: E402
from .errors import DataError  # noqa: E402
from .evaluate import predict_views, triangulated_poses  # noqa: E402
from .geodesic import geodesic_weight_map  # noqa: E402
from .models import load_checkpoint, restore_models  # noqa: E402
from .puppet import puppet_topology  # noqa: E402
from .rendering import skeleton_mask  # noqa: E402

PANELS = ("overlay", "skeleton", "physique", "geodesic", "pose")


def draw_pose2d(ax, kpts: np.ndarray, topology, color: str, label=None) -> None:
    """Bones and joints of one (J, 2) pose onto an axes."""
    first = True
    for i, j in topology.bones:
        ax.plot([kpts[i, 0], kpts[j, 0]], [kpts[i, 1], kpts[j, 1]],
                color=color, linewidth=1.2, label=label if first else None)
        first = False
    ax.scatter(kpts[:, 0], kpts[:, 1], s=6, color=color)


def draw_pose3d(ax, kpts: np.ndarray, topology, color: str, label=None) -> None:
    """Bones of one (J, 3) pose onto a 3D axes."""
    first = True
    for i, j in topology.bones:
        ax.plot([kpts[i, 0], kpts[j, 0]], [kpts[i, 1], kpts[j, 1]],
                [kpts[i, 2], kpts[j, 2]], color=color, linewidth=1.2,
                label=label if first else None)
        first = False


def _view_grid(n_views: int, width: float = 3.0):
    fig, axes = plt.subplots(1, n_views, figsize=(width * n_views, width))
    return fig, np.atleast_1d(axes)


def _save(fig, path: Path) -> Path:
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def save_sample_panels(detector, spn, dataset: MaskDataset, index: int,
                       out_dir: Path, sigma: float) -> list[Path]:
    """Write the five diagnostic images for one sample; returns the paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    sid = dataset.sample_ids[index]
    topo = puppet_topology()
    R = detector.cfg.input_size[0]
    W_img, H_img = dataset.image_size
    scale = W_img / R

    full = dataset.load_masks(index)                       # (V, H, W)
    small = downsample_masks(full, W_img // R) if scale > 1 else full
    pred2d, _ = predict_views(detector, small[None])
    kpts = pred2d[0]                                       # (V, J, 2) at R px
    V = kpts.shape[0]
    paths = []

    fig, axes = _view_grid(V)
    for v, ax in enumerate(axes):
        ax.imshow(full[v], cmap="gray", vmin=0, vmax=1)
        draw_pose2d(ax, kpts[v] * scale, topo, color="tab:orange")
        ax.set_title(f"view {v}")
        ax.set_axis_off()
    paths.append(_save(fig, out_dir / f"{sid}_overlay.png"))

    skel = skeleton_mask(torch.tensor(kpts), topo, sigma, (R, R)).numpy()
    fig, axes = _view_grid(V)
    for v, ax in enumerate(axes):
        ax.imshow(skel[v], cmap="gray")
        ax.set_title(f"view {v}")
        ax.set_axis_off()
    paths.append(_save(fig, out_dir / f"{sid}_skeleton.png"))

    with torch.no_grad():
        physique = spn(torch.tensor(skel[:, None], dtype=torch.float32))
    fig, axes = _view_grid(V)
    for v, ax in enumerate(axes):
        ax.imshow(physique[v, 0].numpy(), cmap="gray", vmin=0, vmax=1)
        ax.set_title(f"view {v}")
        ax.set_axis_off()
    paths.append(_save(fig, out_dir / f"{sid}_physique.png"))

    fig, axes = _view_grid(V)
    for v, ax in enumerate(axes):
        wm = geodesic_weight_map(small[v] > 0.5)
        im = ax.imshow(wm.values, cmap="viridis")
        fig.colorbar(im, ax=ax, fraction=0.046)
        ax.set_title(f"view {v}")
        ax.set_axis_off()
    paths.append(_save(fig, out_dir / f"{sid}_geodesic.png"))

    rec = dataset.load_record(index)
    pred3d = triangulated_poses(kpts[None] * scale, dataset.rig)[0]
    fig = plt.figure(figsize=(3.0 * (V + 1), 3.2))
    for v in range(V):
        ax = fig.add_subplot(1, V + 1, v + 1)
        draw_pose2d(ax, rec.joints2d[v], topo, color="tab:blue", label="gt")
        draw_pose2d(ax, kpts[v] * scale, topo, color="tab:orange", label="pred")
        ax.set_xlim(0, W_img)
        ax.set_ylim(H_img, 0)
        ax.set_title(f"view {v}")
        ax.legend(fontsize=7)
    ax3 = fig.add_subplot(1, V + 1, V + 1, projection="3d")
    draw_pose3d(ax3, rec.joints3d, topo, color="tab:blue", label="gt")
    draw_pose3d(ax3, pred3d, topo, color="tab:orange", label="pred")
    ax3.set_box_aspect((1, 1, 1))
    ax3.set_title("world 3D")
    ax3.legend(fontsize=7)
    paths.append(_save(fig, out_dir / f"{sid}_pose.png"))
    return paths


def visualize_samples(checkpoint_path, dataset_dir, indices, out_dir) -> list[Path]:
    """Render the five panels for every requested sample index."""
    doc = load_checkpoint(checkpoint_path)
    detector, spn = restore_models(doc)
    if spn is None:
        raise DataError("checkpoint has no shape prior network, so the "
                        "physique panel cannot be rendered")
    detector.eval()
    spn.eval()
    dataset = MaskDataset(dataset_dir)
    R = detector.cfg.input_size[0]
    cfg_doc = doc.get("config") or {}
    sigma = cfg_doc.get("sigma_px") or 2.5 * R / 128.0
    paths = []
    for i in indices:
        if not 0 <= i < len(dataset):
            raise DataError(f"sample index {i} out of range for {len(dataset)} samples")
        paths.extend(save_sample_panels(detector, spn, dataset, i, Path(out_dir),
                                        float(sigma)))
    return paths
