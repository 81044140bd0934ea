"""Trainable models: the pose detector and the shape prior network.

The detector maps an image to a per-joint 3D heatmap volume (depth x grid),
normalizes each joint's volume to a distribution with a softmax over all
bins, and reads out coordinates as the expectation of bin centers (integral
readout). x and y are reported in input pixel space, z in metric depth over
a configured range, so the 3D output lives in the camera-aligned
(px, px, mm) frame that the unprojection and triangulation paths consume.

The shape prior network is a small encoder-decoder with skip connections and
a final sigmoid; it turns a rendered skeleton mask into a soft physique mask
and stays differentiable end to end so mask gradients reach the keypoints.

All feature normalization is per-sample group normalization: outputs for a
fixed input do not depend on what else shares the batch.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .errors import DataError

CHECKPOINT_FORMAT = "maskpose-checkpoint-v1"


# ---------------------------------------------------------------------------
# configs and volume type
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DetectorConfig:
    """Architecture and discretization choices for the detector."""

    input_size: tuple[int, int] = (64, 64)
    n_joints: int = 18
    depth_bins: int = 16
    grid_size: tuple[int, int] = (16, 16)
    widths: tuple[int, ...] = (32, 48, 96, 128)
    groups: int = 8
    depth_range: tuple[float, float] = (2000.0, 4000.0)

    def __post_init__(self):
        H, W = self.input_size
        if H < 8 or W < 8:
            raise ValueError("input size too small")
        if self.n_joints < 1:
            raise ValueError("need at least one joint")
        if self.depth_bins < 2 or self.grid_size[0] < 2 or self.grid_size[1] < 2:
            raise ValueError("volume dimensions must each be at least 2")
        for w in self.widths:
            if w % self.groups != 0:
                raise ValueError(f"group count {self.groups} must divide width {w}")
        z0, z1 = self.depth_range
        if not z1 > z0:
            raise ValueError("depth_range must be increasing")


@dataclass(frozen=True)
class HeatmapVolume:
    """Per-joint discrete 3D likelihood (J, D, H', W'), each summing to 1."""

    values: np.ndarray
    depth_range: tuple[float, float]

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float32)
        if values.ndim != 4:
            raise ValueError("volume must be (J, D, H', W')")
        if (values < 0).any():
            raise ValueError("volume values must be nonnegative")
        sums = values.reshape(values.shape[0], -1).sum(axis=1)
        if np.abs(sums - 1.0).max() > 1e-5:
            raise ValueError("each joint's volume must sum to 1")
        object.__setattr__(self, "values", values)


# ---------------------------------------------------------------------------
# integral readout
# ---------------------------------------------------------------------------


def volume_softmax(logits: torch.Tensor) -> torch.Tensor:
    """Normalize (..., D, H', W') logits to a distribution per leading index."""
    D, H, W = logits.shape[-3:]
    flat = logits.reshape(*logits.shape[:-3], D * H * W)
    return torch.softmax(flat, dim=-1).reshape(*logits.shape[:-3], D, H, W)


def integral_readout(probs: torch.Tensor, input_size, depth_range) -> torch.Tensor:
    """Expected bin-center coordinates of (..., D, H', W') distributions.

    Returns (..., 3) as (x_px, y_px, z_metric): x, y expectations are mapped
    from grid bins to input pixel space, z over the metric depth range.
    """
    D, Hq, Wq = probs.shape[-3:]
    H_in, W_in = input_size
    z0, z1 = depth_range
    dt = probs.dtype
    dev = probs.device
    xs = (torch.arange(Wq, device=dev, dtype=dt) + 0.5) * (W_in / Wq)
    ys = (torch.arange(Hq, device=dev, dtype=dt) + 0.5) * (H_in / Hq)
    zs = z0 + (torch.arange(D, device=dev, dtype=dt) + 0.5) * ((z1 - z0) / D)
    px = probs.sum(dim=(-3, -2))  # marginal over depth and rows -> (..., W')
    py = probs.sum(dim=(-3, -1))
    pz = probs.sum(dim=(-2, -1))
    return torch.stack([(px * xs).sum(-1), (py * ys).sum(-1), (pz * zs).sum(-1)], dim=-1)


# ---------------------------------------------------------------------------
# network blocks
# ---------------------------------------------------------------------------


def _init_conv(m: nn.Module) -> None:
    # fan-in-scaled uniform for weights and biases
    if isinstance(m, nn.Conv2d):
        fan_in = m.in_channels * m.kernel_size[0] * m.kernel_size[1]
        bound = (6.0 / fan_in) ** 0.5
        nn.init.uniform_(m.weight, -bound, bound)
        if m.bias is not None:
            nn.init.uniform_(m.bias, -1.0 / fan_in ** 0.5, 1.0 / fan_in ** 0.5)


class ConvBlock(nn.Module):
    # GELU rather than ReLU: the mask losses are probed against finite
    # differences end to end, and a smooth activation keeps those probes
    # honest instead of straddling kinks
    def __init__(self, c_in, c_out, groups):
        super().__init__()
        self.conv = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.norm = nn.GroupNorm(groups, c_out)
        self.act = nn.GELU()

    def forward(self, x):
        return self.act(self.norm(self.conv(x)))


class PoseDetector(nn.Module):
    """Encoder-decoder producing (B, J, D, H', W') heatmap logits."""

    def __init__(self, cfg: DetectorConfig):
        super().__init__()
        self.cfg = cfg
        w0, w1, w2, w3 = cfg.widths
        g = cfg.groups
        self.stem = ConvBlock(3, w0, g)
        self.enc1 = nn.Sequential(ConvBlock(w0, w1, g), ConvBlock(w1, w1, g))
        self.enc2 = nn.Sequential(ConvBlock(w1, w2, g), ConvBlock(w2, w2, g))
        self.enc3 = nn.Sequential(ConvBlock(w2, w3, g), ConvBlock(w3, w3, g))
        self.mid = ConvBlock(w3, w3, g)
        self.dec = nn.Sequential(ConvBlock(w3 + w2, w2, g), ConvBlock(w2, w2, g))
        self.head = nn.Conv2d(w2, cfg.n_joints * cfg.depth_bins, 1)
        # average pooling for the same reason as GELU: max pooling is kinked
        # wherever the argmax changes
        self.pool = nn.AvgPool2d(2)
        self.apply(_init_conv)

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        cfg = self.cfg
        if image.dim() != 4 or image.shape[1] != 3 or tuple(image.shape[2:]) != cfg.input_size:
            raise DataError(
                f"detector expects (B, 3, {cfg.input_size[0]}, {cfg.input_size[1]}) input, "
                f"got {tuple(image.shape)}")
        x0 = self.stem(image)
        x1 = self.enc1(self.pool(x0))            # /2
        x2 = self.enc2(self.pool(x1))            # /4
        x3 = self.mid(self.enc3(self.pool(x2)))  # /8
        up = nn.functional.interpolate(x3, scale_factor=2, mode="nearest")
        y = self.dec(torch.cat([up, x2], dim=1))  # /4 resolution
        if y.shape[-2:] != cfg.grid_size:
            y = nn.functional.interpolate(y, size=cfg.grid_size, mode="bilinear",
                                          align_corners=False)
        logits = self.head(y)
        B = image.shape[0]
        return logits.reshape(B, cfg.n_joints, cfg.depth_bins, *cfg.grid_size)


def detector_forward(model: PoseDetector, image: torch.Tensor):
    """Full detector pass: (volume probs, 3D readout, 2D readout).

    image: (B, 3, H, W) in [0, 1]. Returns probs (B, J, D, H', W'),
    coords3d (B, J, 3) as (x_px, y_px, z_mm), coords2d (B, J, 2).
    """
    cfg = model.cfg
    logits = model(image)
    probs = volume_softmax(logits)
    coords3d = integral_readout(probs, cfg.input_size, cfg.depth_range)
    return probs, coords3d, coords3d[..., :2]


class ShapePriorNet(nn.Module):
    """Skeleton mask -> soft physique mask, values strictly in (0, 1)."""

    def __init__(self, base_width: int = 16, groups: int = 4):
        super().__init__()
        self.base_width = base_width
        self.groups = groups
        w = base_width
        self.enc0 = ConvBlock(1, w, groups)
        self.enc1 = nn.Sequential(ConvBlock(w, 2 * w, groups), ConvBlock(2 * w, 2 * w, groups))
        self.enc2 = nn.Sequential(ConvBlock(2 * w, 4 * w, groups), ConvBlock(4 * w, 4 * w, groups))
        self.dec1 = ConvBlock(4 * w + 2 * w, 2 * w, groups)
        self.dec0 = ConvBlock(2 * w + w, w, groups)
        self.head = nn.Conv2d(w, 1, 1)
        self.pool = nn.AvgPool2d(2)
        self.apply(_init_conv)

    def forward(self, skel: torch.Tensor) -> torch.Tensor:
        if skel.dim() != 4 or skel.shape[1] != 1:
            raise DataError(f"shape prior net expects (B, 1, H, W), got {tuple(skel.shape)}")
        if skel.shape[2] % 4 or skel.shape[3] % 4:
            raise DataError("shape prior net needs height and width divisible by 4")
        x0 = self.enc0(skel)
        x1 = self.enc1(self.pool(x0))
        x2 = self.enc2(self.pool(x1))
        u1 = nn.functional.interpolate(x2, scale_factor=2, mode="nearest")
        y1 = self.dec1(torch.cat([u1, x1], dim=1))
        u0 = nn.functional.interpolate(y1, scale_factor=2, mode="nearest")
        y0 = self.dec0(torch.cat([u0, x0], dim=1))
        return torch.sigmoid(self.head(y0))


def spn_forward(model: ShapePriorNet, skel: torch.Tensor) -> torch.Tensor:
    """Physique mask prediction for (B, 1, H, W) skeleton masks."""
    return model(skel)


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


# ---------------------------------------------------------------------------
# checkpointing
# ---------------------------------------------------------------------------


def save_checkpoint(path, detector: PoseDetector, spn: ShapePriorNet | None,
                    optimizer_state=None, step: int = 0, stage: int = 0,
                    config: dict | None = None, extra: dict | None = None) -> None:
    """Single-file archive of parameters, optimizer state, and progress."""
    doc = {
        "format": CHECKPOINT_FORMAT,
        "detector_config": detector.cfg.__dict__,
        "detector_state": detector.state_dict(),
        "spn_config": None if spn is None else {"base_width": spn.base_width,
                                                "groups": spn.groups},
        "spn_state": spn.state_dict() if spn is not None else None,
        "optimizer_state": optimizer_state,
        "step": int(step),
        "stage": int(stage),
        "config": config,
        "extra": extra or {},
    }
    torch.save(doc, path)


def load_checkpoint(path):
    """Load and validate a checkpoint archive; returns the raw document."""
    try:
        doc = torch.load(path, map_location="cpu", weights_only=False)
    except FileNotFoundError:
        raise DataError(f"checkpoint not found: {path}")
    except Exception as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(doc, dict) or doc.get("format") != CHECKPOINT_FORMAT:
        raise DataError(f"{path} is not a {CHECKPOINT_FORMAT} archive")
    return doc


def restore_models(doc) -> tuple[PoseDetector, ShapePriorNet | None]:
    """Rebuild model instances from a loaded checkpoint document."""
    cfg = DetectorConfig(**{k: tuple(v) if isinstance(v, list) else v
                            for k, v in doc["detector_config"].items()})
    detector = PoseDetector(cfg)
    detector.load_state_dict(doc["detector_state"])
    spn = None
    if doc.get("spn_state") is not None:
        spn = ShapePriorNet(**(doc.get("spn_config") or {}))
        spn.load_state_dict(doc["spn_state"])
    return detector, spn
