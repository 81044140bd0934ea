"""Run configuration: one flat, versioned record covering data paths, model
shape, loss flags, cascade scheduling, and budgets.

Configs load from JSON with strict key checking so a typo fails loudly
instead of silently training with a default. Every constant that governs a
run lives here; nothing is hidden in module globals.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

from .errors import ConfigError

CONFIG_VERSION = "maskpose-train-v1"
SYNTH_VERSION = "maskpose-synth-v1"


@dataclass
class TrainConfig:
    dataset_dir: str
    out_dir: str
    version: str = CONFIG_VERSION
    seed: int = 0
    steps: int = 12000
    batch_samples: int = 4
    lr_detector: float = 1e-3
    lr_spn: float = 1e-3
    min_lr_factor: float = 0.05
    render_resolution: int = 64
    sigma_px: float | None = None
    alpha_fg: float = 1.0
    alpha_bg: float = 1.0
    depth_bins: int = 16
    depth_range: tuple[float, float] = (2000.0, 4000.0)
    detector_widths: tuple[int, int, int, int] = (32, 48, 96, 128)
    detector_groups: int = 8
    spn_width: int = 16
    spn_groups: int = 4
    multiview: bool = True
    use_spn: bool = True
    use_geodesic: bool = True
    cascade: bool = True
    lambda_s: float = 1.0
    lambda_p_end: float = 1.0
    plateau_window: int = 500
    plateau_rel: float = 0.01
    stage_max_steps: tuple[int, int] = (4000, 4000)
    eval_every: int = 1000
    eval_samples: int = 64
    eval_fraction: float = 0.1
    checkpoint_every: int = 2000

    def __post_init__(self):
        if self.version != CONFIG_VERSION:
            raise ConfigError(f"config version {self.version!r} is not {CONFIG_VERSION!r}")
        for name in ("steps", "batch_samples", "render_resolution", "depth_bins",
                     "plateau_window", "eval_every", "eval_samples", "checkpoint_every",
                     "detector_groups", "spn_width", "spn_groups"):
            if int(getattr(self, name)) <= 0:
                raise ConfigError(f"{name} must be positive")
        for name in ("lr_detector", "lr_spn"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.sigma_px is not None and self.sigma_px <= 0:
            raise ConfigError("sigma_px must be positive")
        if self.lambda_s < 0 or self.lambda_p_end < 0:
            raise ConfigError("loss weights must be nonnegative")
        if not 0 < self.plateau_rel < 1:
            raise ConfigError("plateau_rel must be in (0, 1)")
        if not 0 < self.eval_fraction < 1:
            raise ConfigError("eval_fraction must be in (0, 1)")
        if not 0 < self.min_lr_factor <= 1:
            raise ConfigError("min_lr_factor must be in (0, 1]")
        if len(self.stage_max_steps) != 2 or min(self.stage_max_steps) <= 0:
            raise ConfigError("stage_max_steps needs two positive entries")
        lo, hi = self.depth_range
        if not lo < hi:
            raise ConfigError("depth_range must be increasing")
        self.depth_range = (float(lo), float(hi))
        self.detector_widths = tuple(int(w) for w in self.detector_widths)
        self.stage_max_steps = tuple(int(s) for s in self.stage_max_steps)

    @property
    def sigma(self) -> float:
        """Rendering bandwidth in pixels; scales with the training raster."""
        if self.sigma_px is not None:
            return float(self.sigma_px)
        return 2.5 * self.render_resolution / 128.0

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"


@dataclass
class SynthConfig:
    """Dataset generation settings for the synthetic puppet benchmark."""

    out_dir: str
    n_samples: int
    version: str = SYNTH_VERSION
    seed: int = 0
    n_views: int = 4
    image_size: int = 128
    allow_occlusion: bool = False

    def __post_init__(self):
        if self.version != SYNTH_VERSION:
            raise ConfigError(f"config version {self.version!r} is not {SYNTH_VERSION!r}")
        for name in ("n_samples", "n_views", "image_size"):
            if int(getattr(self, name)) <= 0:
                raise ConfigError(f"{name} must be positive")

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"


def _config_from_dict(cls, doc: dict, required: tuple, tuple_keys: tuple = ()):
    known = {f.name for f in fields(cls)}
    unknown = set(doc) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    for name in required:
        if name not in doc:
            raise ConfigError(f"config is missing required key {name!r}")
    doc = dict(doc)
    for name in tuple_keys:
        if name in doc:
            doc[name] = tuple(doc[name])
    try:
        return cls(**doc)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid config: {e}") from e


def _read_config_doc(path) -> dict:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    try:
        doc = json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file is not valid JSON: {e}") from e
    if not isinstance(doc, dict):
        raise ConfigError("config file must hold a JSON object")
    return doc


def train_config_from_dict(doc: dict) -> TrainConfig:
    return _config_from_dict(TrainConfig, doc, required=("dataset_dir", "out_dir"),
                             tuple_keys=("depth_range", "detector_widths",
                                         "stage_max_steps"))


def load_train_config(path) -> TrainConfig:
    return train_config_from_dict(_read_config_doc(path))


def synth_config_from_dict(doc: dict) -> SynthConfig:
    return _config_from_dict(SynthConfig, doc, required=("out_dir", "n_samples"))


def load_synth_config(path) -> SynthConfig:
    return synth_config_from_dict(_read_config_doc(path))
