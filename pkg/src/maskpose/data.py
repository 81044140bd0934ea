"""Reading the on-disk mask dataset layout.

A dataset directory holds masks/<sample>/<view>.png, gt/<sample>.json,
rig.json, and manifest.json. The reader validates the manifest, exposes
per-sample mask stacks and ground truth, and provides the small batch and
resolution utilities the trainer needs.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .errors import DataError
from .geometry import MultiViewRig, load_rig
from .puppet import DATASET_FORMAT
from .validation import check_binary_mask


@dataclass(frozen=True)
class SampleRecord:
    """One sample's file locations and ground truth."""

    sample_id: str
    mask_paths: tuple[Path, ...]
    joints3d: np.ndarray          # (J, 3) mm
    joints2d: np.ndarray          # (V, J, 2) px, as stored at generation time
    joint_names: tuple[str, ...]


class MaskDataset:
    """Random access to a dataset directory written by the generator."""

    def __init__(self, root):
        self.root = Path(root)
        manifest_path = self.root / "manifest.json"
        if not manifest_path.exists():
            raise DataError(f"no manifest.json under {self.root}")
        try:
            self.manifest = json.loads(manifest_path.read_text())
        except json.JSONDecodeError as e:
            raise DataError(f"manifest.json is not valid JSON: {e}") from e
        if self.manifest.get("format") != DATASET_FORMAT:
            raise DataError(f"unsupported dataset format tag {self.manifest.get('format')!r}")
        self.rig: MultiViewRig = load_rig(self.root / "rig.json")
        self.sample_ids: list[str] = list(self.manifest["samples"])
        if len(self.sample_ids) != self.manifest["n_samples"]:
            raise DataError("manifest sample list does not match n_samples")

    def __len__(self) -> int:
        return len(self.sample_ids)

    @property
    def n_views(self) -> int:
        return int(self.manifest["n_views"])

    @property
    def image_size(self) -> tuple[int, int]:
        w, h = self.manifest["image_size"]
        return int(w), int(h)

    def mask_paths(self, index: int) -> tuple[Path, ...]:
        sid = self.sample_ids[index]
        return tuple(self.root / "masks" / sid / f"{v}.png" for v in range(self.n_views))

    def load_masks(self, index: int) -> np.ndarray:
        """(V, H, W) float32 in {0, 1}."""
        from PIL import Image

        stacks = []
        for path in self.mask_paths(index):
            if not path.exists():
                raise DataError(f"missing mask file {path}")
            arr = np.asarray(Image.open(path))
            stacks.append(check_binary_mask(arr, str(path)).astype(np.float32))
        return np.stack(stacks)

    def load_record(self, index: int) -> SampleRecord:
        sid = self.sample_ids[index]
        path = self.root / "gt" / f"{sid}.json"
        if not path.exists():
            raise DataError(f"missing ground-truth file {path}")
        doc = json.loads(path.read_text())
        return SampleRecord(
            sample_id=sid,
            mask_paths=self.mask_paths(index),
            joints3d=np.asarray(doc["joints3d_mm"], dtype=np.float64),
            joints2d=np.asarray(doc["joints2d_px"], dtype=np.float64),
            joint_names=tuple(doc["joint_names"]),
        )

    def masks_tensor(self, indices, dtype=torch.float32) -> torch.Tensor:
        """(N, V, H, W) stack for the given sample indices."""
        return torch.as_tensor(np.stack([self.load_masks(i) for i in indices]), dtype=dtype)


def split_indices(n: int, eval_fraction: float = 0.1) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic interleaved train/eval split over sample indices."""
    if not 0.0 < eval_fraction < 1.0:
        raise ValueError("eval_fraction must be in (0, 1)")
    step = max(2, round(1.0 / eval_fraction))
    idx = np.arange(n)
    eval_idx = idx[step - 1::step]
    train_idx = np.setdiff1d(idx, eval_idx)
    if len(eval_idx) == 0 or len(train_idx) == 0:
        raise ValueError(f"split of {n} samples leaves an empty side")
    return train_idx, eval_idx


def downsample_masks(masks: np.ndarray, factor: int) -> np.ndarray:
    """Block-mean downsample of (..., H, W) rasters by an integer factor.

    Binary masks come back soft along the boundary, which is exactly what a
    lower-resolution silhouette target should look like.
    """
    if factor < 1:
        raise ValueError("factor must be >= 1")
    if factor == 1:
        return np.asarray(masks, dtype=np.float32)
    arr = np.asarray(masks, dtype=np.float32)
    H, W = arr.shape[-2:]
    if H % factor or W % factor:
        raise ValueError(f"resolution {(H, W)} is not divisible by factor {factor}")
    shape = arr.shape[:-2] + (H // factor, factor, W // factor, factor)
    return arr.reshape(shape).mean(axis=(-3, -1))
