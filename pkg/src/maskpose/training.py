"""Cascaded training loop.

Optimization runs in stages: core bones against the skeleton term first,
then the shape prior joins with a linearly ramped weight, finally the arm
bones activate. Stage boundaries come from plateau detection on the training
loss, each with a fixed-step cap. The loop is deterministic under a fixed
seed, resumable from checkpoints, and writes one structured record per step.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch

from .config import TrainConfig
from .data import MaskDataset, downsample_masks, split_indices
from .errors import ConfigError, DataError, NumericError
from .geodesic import load_or_compute_weight_map
from .geometry import ARMS_HANDS, CORE, SkeletonTopology, triangulate_points
from .losses import LossWeights, combined_loss, multiview_consistency_loss
from .metrics import mpjpe, root_centered
from .models import (DetectorConfig, PoseDetector, ShapePriorNet,
                     detector_forward, load_checkpoint, restore_models,
                     save_checkpoint)
from .puppet import puppet_topology

TRIGGER_KINDS = ("fixed", "plateau")
UNBOUNDED_STEPS = 10 ** 9


# ---------------------------------------------------------------------------
# cascade schedule
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class StageTrigger:
    """When a stage hands over: at a fixed step count, or earlier once the
    training loss plateaus (mean over the last window improves on the mean
    over the window before it by less than rel_improvement)."""

    kind: str = "plateau"
    max_steps: int = UNBOUNDED_STEPS
    window: int = 500
    rel_improvement: float = 0.01

    def __post_init__(self):
        if self.kind not in TRIGGER_KINDS:
            raise ValueError(f"unknown trigger kind {self.kind!r}")
        if self.max_steps < 1:
            raise ValueError("max_steps must be at least 1")
        if self.window < 1:
            raise ValueError("window must be at least 1")
        if not 0 < self.rel_improvement < 1:
            raise ValueError("rel_improvement must be in (0, 1)")


@dataclass(frozen=True)
class CascadeStage:
    """One stage: which bones the losses see and how the weights evolve.

    lambda_p ramps linearly from lambda_p_start to lambda_p_end over
    ramp_steps (the trigger cap when unset); it never decreases in-stage.
    """

    active_bone_groups: tuple[str, ...]
    lambda_s: float
    lambda_p_start: float
    lambda_p_end: float
    trigger: StageTrigger
    ramp_steps: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "active_bone_groups", tuple(self.active_bone_groups))
        if not self.active_bone_groups:
            raise ValueError("a stage needs at least one active bone group")
        if self.lambda_s < 0 or self.lambda_p_start < 0 or self.lambda_p_end < 0:
            raise ValueError("loss weights must be nonnegative")
        if self.lambda_p_end < self.lambda_p_start:
            raise ValueError("lambda_p must not decrease within a stage")
        if self.ramp_steps is not None and self.ramp_steps < 1:
            raise ValueError("ramp_steps must be at least 1")

    @property
    def ramp(self) -> int:
        return self.ramp_steps if self.ramp_steps is not None else self.trigger.max_steps


@dataclass(frozen=True)
class CascadeSchedule:
    stages: tuple[CascadeStage, ...]

    def __post_init__(self):
        object.__setattr__(self, "stages", tuple(self.stages))
        if not self.stages:
            raise ValueError("schedule needs at least one stage")
        if self.stages[0].lambda_p_start != 0:
            raise ValueError("the first stage must start with lambda_p = 0")
        seen: set[str] = set()
        for i, stage in enumerate(self.stages):
            groups = set(stage.active_bone_groups)
            if i > 0 and not groups >= seen:
                raise ValueError("active bone groups must be nondecreasing across stages")
            seen |= groups


@dataclass(frozen=True)
class CascadeState:
    """Resolved scheduling facts for one training step."""

    stage: int
    active_groups: tuple[str, ...]
    lambda_s: float
    lambda_p: float

    def active_bones(self, topology: SkeletonTopology) -> tuple[int, ...]:
        return topology.bones_in_groups(self.active_groups)

    def loss_weights(self) -> LossWeights:
        return LossWeights(lambda_s=self.lambda_s, lambda_p=self.lambda_p)


def _stage_done(trigger: StageTrigger, elapsed: int, history, now: int) -> bool:
    if elapsed >= trigger.max_steps:
        return True
    if trigger.kind == "fixed":
        return False
    w = trigger.window
    if elapsed < 2 * w:
        return False
    cur = float(np.mean(history[now - w:now]))
    prev = float(np.mean(history[now - 2 * w:now - w]))
    if prev <= 0:
        return True
    return (prev - cur) / prev < trigger.rel_improvement


def _ramp_value(stage: CascadeStage, elapsed: int) -> float:
    frac = min(1.0, elapsed / stage.ramp)
    return stage.lambda_p_start + (stage.lambda_p_end - stage.lambda_p_start) * frac


def cascade_state(step: int, history, schedule: CascadeSchedule,
                  stage_override: int | None = None) -> CascadeState:
    """Stage and loss weights in force at ``step``.

    ``history`` holds per-step training losses for every step before
    ``step``; stage transitions are replayed from the start, so the result
    is a pure function of its arguments and the incremental tracker must
    agree with it. ``stage_override`` pins one stage for the whole run.
    """
    if step < 0:
        raise ValueError("step must be nonnegative")
    if len(history) < step:
        raise ValueError(f"history has {len(history)} entries, step {step} needs that many")
    stages = schedule.stages
    if stage_override is not None:
        if not 0 <= stage_override < len(stages):
            raise ValueError(f"stage_override {stage_override} out of range")
        st = stages[stage_override]
        return CascadeState(stage_override, st.active_bone_groups, st.lambda_s,
                            st.lambda_p_end)
    stage, start = 0, 0
    for now in range(step + 1):
        if stage + 1 < len(stages) and _stage_done(stages[stage].trigger,
                                                   now - start, history, now):
            stage += 1
            start = now
    st = stages[stage]
    return CascadeState(stage, st.active_bone_groups, st.lambda_s,
                        _ramp_value(st, step - start))


class CascadeTracker:
    """Incremental mirror of ``cascade_state`` for the training loop.

    Call ``state(step)`` once per step in order, then ``record(loss)`` with
    that step's training loss. Stage index and stage start are plain fields
    so checkpoints can persist and restore them.
    """

    def __init__(self, schedule: CascadeSchedule, stage_override: int | None = None):
        if stage_override is not None and not 0 <= stage_override < len(schedule.stages):
            raise ValueError(f"stage_override {stage_override} out of range")
        self.schedule = schedule
        self.stage_override = stage_override
        self.stage = 0
        self.stage_start = 0
        self.history: list[float] = []

    def state(self, step: int) -> CascadeState:
        if step != len(self.history):
            raise ValueError(
                f"tracker is at step {len(self.history)}, cannot resolve step {step}")
        stages = self.schedule.stages
        if self.stage_override is not None:
            st = stages[self.stage_override]
            return CascadeState(self.stage_override, st.active_bone_groups,
                                st.lambda_s, st.lambda_p_end)
        if (self.stage + 1 < len(stages)
                and _stage_done(stages[self.stage].trigger, step - self.stage_start,
                                self.history, step)):
            self.stage += 1
            self.stage_start = step
        st = stages[self.stage]
        return CascadeState(self.stage, st.active_bone_groups, st.lambda_s,
                            _ramp_value(st, step - self.stage_start))

    def record(self, loss: float) -> None:
        self.history.append(float(loss))


def build_schedule(cfg: TrainConfig) -> CascadeSchedule:
    """Default three-stage cascade, or a single all-bones stage without it.

    Stage 1 fits core bones with the skeleton term alone; stage 2 ramps the
    shape prior in on the same bones; stage 3 activates arms and runs to the
    step budget. With the cascade off, everything is on from the start and
    lambda_p still ramps from 0 so the two setups share their warm-up.
    """
    cap1, cap2 = cfg.stage_max_steps
    lam_end = cfg.lambda_p_end if cfg.use_spn else 0.0
    all_groups = (CORE, ARMS_HANDS)
    if not cfg.cascade:
        stage = CascadeStage(all_groups, cfg.lambda_s, 0.0, lam_end,
                             StageTrigger("fixed", UNBOUNDED_STEPS),
                             ramp_steps=max(1, cap2 // 2))
        return CascadeSchedule((stage,))
    stages = (
        CascadeStage((CORE,), cfg.lambda_s, 0.0, 0.0,
                     StageTrigger("plateau", cap1, cfg.plateau_window, cfg.plateau_rel)),
        CascadeStage((CORE,), cfg.lambda_s, 0.0, lam_end,
                     StageTrigger("plateau", cap2, cfg.plateau_window, cfg.plateau_rel),
                     ramp_steps=max(1, cap2 // 2)),
        CascadeStage(all_groups, cfg.lambda_s, lam_end, lam_end,
                     StageTrigger("fixed", UNBOUNDED_STEPS)),
    )
    return CascadeSchedule(stages)


# ---------------------------------------------------------------------------
# one optimization step
# ---------------------------------------------------------------------------


def train_step(masks: torch.Tensor, weight, cams, models, optimizer,
               state: CascadeState, topology: SkeletonTopology, sigma: float,
               multiview: bool = True) -> dict:
    """One gradient update on a batch.

    masks: (V, B, H, W) targets in [0, 1]; weight: optional matching weight
    maps; cams: (K, E) intrinsics/extrinsics at the mask resolution; models:
    (detector, spn or None). Returns the loss record with plain floats.
    Raises NumericError on a non-finite loss before any parameter update.
    """
    detector, spn = models
    K, E = cams
    V, B, H, W = masks.shape
    inp = masks.reshape(V * B, 1, H, W).expand(-1, 3, -1, -1)
    _, _, coords2d = detector_forward(detector, inp)
    if not bool(torch.isfinite(coords2d).all()):
        raise NumericError("non-finite keypoint predictions from the detector")
    kpts2d = coords2d.reshape(V, B, -1, 2)

    lw = state.loss_weights()
    active = state.active_bones(topology)
    spn_arg = spn if lw.lambda_p > 0 else None
    try:
        total, l_skel, l_physo = combined_loss(
            masks, kpts2d, topology, sigma, lw, spn=spn_arg,
            active_bones=active, weight=weight, return_parts=True)
        if multiview:
            l_mv = multiview_consistency_loss(
                masks, kpts2d, K, E, topology, sigma, lw, spn=spn_arg,
                active_bones=active, weight=weight)
            total = total + l_mv
        else:
            l_mv = torch.zeros((), dtype=total.dtype)
    except torch.linalg.LinAlgError as e:
        raise NumericError(f"loss evaluation failed: {e}") from e

    if not bool(torch.isfinite(total)):
        raise NumericError(
            f"non-finite training loss (skeleton {float(l_skel)}, physique "
            f"{float(l_physo)}, multiview {float(l_mv)})")
    optimizer.zero_grad(set_to_none=True)
    total.backward()
    optimizer.step()
    return {
        "total": float(total.detach()),
        "l_skel": float(l_skel.detach()),
        "l_physo": float(l_physo.detach()),
        "l_mv": float(l_mv.detach()),
    }


# ---------------------------------------------------------------------------
# full run
# ---------------------------------------------------------------------------


def _lr_at(base: float, min_factor: float, elapsed: int, horizon: int) -> float:
    # cosine decay to base * min_factor over the stage horizon
    frac = min(1.0, elapsed / max(1, horizon))
    return base * (min_factor + (1.0 - min_factor) * 0.5 * (1.0 + math.cos(math.pi * frac)))


def _atomic_write_text(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    tmp.replace(path)


def _drop_stale_records(path: Path, step: int) -> None:
    """Remove log records at or past ``step`` left over by an interrupted run."""
    if not path.exists():
        return
    kept = [line for line in path.read_text().splitlines()
            if line.strip() and json.loads(line)["step"] < step]
    _atomic_write_text(path, "".join(line + "\n" for line in kept))


def _quick_mpjpe(detector: PoseDetector, masks_all: np.ndarray, indices,
                 dataset: MaskDataset, render_resolution: int,
                 chunk: int = 8) -> float:
    """Triangulated MPJPE (mm, root-centered) over the given samples."""
    W_img, _ = dataset.image_size
    scale = W_img / render_resolution
    K, E = dataset.rig.camera_tensors(torch.float64)
    indices = list(indices)
    preds = []
    was_training = detector.training
    detector.eval()
    with torch.no_grad():
        for lo in range(0, len(indices), chunk):
            ids = indices[lo:lo + chunk]
            m = torch.as_tensor(masks_all[ids].astype(np.float32))  # (n, V, R, R)
            n, V, R, _ = m.shape
            inp = m.reshape(n * V, 1, R, R).expand(-1, 3, -1, -1)
            _, _, c2 = detector_forward(detector, inp)
            obs = (c2.reshape(n, V, -1, 2).permute(1, 0, 2, 3).double() * scale)
            X = triangulate_points(obs, K, E)  # (n, J, 3)
            preds.append(X.numpy())
    if was_training:
        detector.train()
    pred = np.concatenate(preds)
    gt = np.stack([dataset.load_record(i).joints3d for i in indices])
    return float(mpjpe(root_centered(pred), root_centered(gt)))


def _preload_masks(dataset: MaskDataset, render_resolution: int) -> np.ndarray:
    """All masks, block-downsampled to the training raster, as (N, V, R, R)."""
    W_img, _ = dataset.image_size
    factor = W_img // render_resolution
    n = len(dataset)
    out = np.empty((n, dataset.n_views, render_resolution, render_resolution),
                   dtype=np.float16)
    for i in range(n):
        m = dataset.load_masks(i)
        out[i] = downsample_masks(m, factor) if factor > 1 else m
    return out


def _preload_weights(masks_all: np.ndarray, train_idx, alpha_fg: float,
                     alpha_bg: float, cache_dir) -> np.ndarray:
    """Geodesic weight maps for the training samples (ones elsewhere)."""
    out = np.ones(masks_all.shape, dtype=np.float16)
    for i in train_idx:
        for v in range(masks_all.shape[1]):
            hard = masks_all[i, v] > 0.5
            if not hard.any():
                continue
            wm = load_or_compute_weight_map(hard, alpha_fg, alpha_bg,
                                            cache_dir=cache_dir)
            out[i, v] = wm.values
    return out


def _scaled_intrinsics(rig, render_resolution: int) -> tuple[torch.Tensor, torch.Tensor]:
    K, E = rig.camera_tensors(torch.float32)
    W_img, H_img = rig.views[0].image_size
    S = torch.tensor([[render_resolution / W_img, 0.0, 0.0],
                      [0.0, render_resolution / H_img, 0.0],
                      [0.0, 0.0, 1.0]], dtype=torch.float32)
    return S @ K, E


def fit(cfg: TrainConfig, resume: bool = True, verbose: bool = False,
        stage_override: int | None = None) -> dict:
    """Run the training loop to the configured step budget.

    Writes into cfg.out_dir: config.json (resolved snapshot), log.jsonl (one
    record per step), metrics.jsonl (periodic triangulated eval),
    checkpoint.pt, and final_metrics.json. An existing checkpoint is resumed
    when ``resume`` is on; log records past the checkpoint are dropped so
    the rewound steps are re-run cleanly. Returns a summary dict.
    """
    dataset = MaskDataset(cfg.dataset_dir)
    W_img, H_img = dataset.image_size
    R = cfg.render_resolution
    if W_img != H_img:
        raise DataError("training expects square dataset images")
    if W_img % R != 0:
        raise ConfigError(
            f"render_resolution {R} must divide the dataset image size {W_img}")
    if cfg.multiview and dataset.n_views < 2:
        raise ConfigError("multiview consistency needs at least 2 views")
    topology = puppet_topology()
    probe = dataset.load_record(0)
    if len(probe.joint_names) != topology.n_joints:
        raise DataError(
            f"dataset has {len(probe.joint_names)} joints, expected {topology.n_joints}")
    train_idx, eval_idx = split_indices(len(dataset), cfg.eval_fraction)

    schedule = build_schedule(cfg)
    rng = np.random.default_rng(cfg.seed)
    torch.manual_seed(cfg.seed)

    det_cfg = DetectorConfig(input_size=(R, R), n_joints=topology.n_joints,
                             depth_bins=cfg.depth_bins, grid_size=(R // 4, R // 4),
                             widths=cfg.detector_widths, groups=cfg.detector_groups,
                             depth_range=cfg.depth_range)
    detector = PoseDetector(det_cfg)
    spn = ShapePriorNet(cfg.spn_width, cfg.spn_groups) if cfg.use_spn else None

    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ckpt_path = out / "checkpoint.pt"
    log_path = out / "log.jsonl"
    metrics_path = out / "metrics.jsonl"

    tracker = CascadeTracker(schedule, stage_override)
    start_step = 0
    opt_state = None
    resumed = resume and ckpt_path.exists()
    if resumed:
        doc = load_checkpoint(ckpt_path)
        detector, spn = restore_models(doc)
        if cfg.use_spn and spn is None:
            raise DataError("checkpoint has no shape prior network but the config needs one")
        start_step = int(doc["step"])
        extra = doc.get("extra") or {}
        tracker.stage = int(doc["stage"])
        tracker.stage_start = int(extra.get("stage_start", 0))
        tracker.history = [float(x) for x in extra.get("history", ())]
        if "np_rng" in extra:
            rng.bit_generator.state = extra["np_rng"]
        if "torch_rng" in extra:
            torch.set_rng_state(extra["torch_rng"])
        opt_state = doc.get("optimizer_state")
        _drop_stale_records(log_path, start_step)
        _drop_stale_records(metrics_path, start_step + 1)

    param_groups = [{"params": detector.parameters(), "lr": cfg.lr_detector}]
    if spn is not None:
        param_groups.append({"params": spn.parameters(), "lr": cfg.lr_spn})
    optimizer = torch.optim.Adam(param_groups)
    if opt_state is not None:
        optimizer.load_state_dict(opt_state)

    t0 = time.time()
    masks_all = _preload_masks(dataset, R)
    weights_all = None
    if cfg.use_geodesic:
        weights_all = _preload_weights(masks_all, train_idx, cfg.alpha_fg,
                                       cfg.alpha_bg,
                                       Path(cfg.dataset_dir) / "geodesic_cache")
    K_scaled, E = _scaled_intrinsics(dataset.rig, R)
    if verbose:
        print(f"[fit] preloaded {len(dataset)} samples x {dataset.n_views} views "
              f"at {R}x{R} in {time.time() - t0:.1f}s")

    _atomic_write_text(out / "config.json", cfg.to_json())
    eval_subset = list(eval_idx[:cfg.eval_samples])
    replace = len(train_idx) < cfg.batch_samples
    sigma = cfg.sigma
    detector.train()
    if spn is not None:
        spn.train()

    def save(step: int) -> None:
        extra = {"history": tracker.history, "stage_start": tracker.stage_start,
                 "np_rng": rng.bit_generator.state,
                 "torch_rng": torch.get_rng_state()}
        tmp = out / "checkpoint.pt.tmp"
        save_checkpoint(tmp, detector, spn,
                        optimizer_state=optimizer.state_dict(), step=step,
                        stage=tracker.stage, config=asdict(cfg), extra=extra)
        tmp.replace(ckpt_path)

    last_stage = tracker.stage
    log_f = open(log_path, "a" if resumed else "w")
    metrics_f = open(metrics_path, "a" if resumed else "w")
    try:
        for step in range(start_step, cfg.steps):
            state = tracker.state(step)
            if verbose and state.stage != last_stage:
                print(f"[fit] step {step}: stage {last_stage} -> {state.stage}")
            last_stage = state.stage

            if stage_override is None:
                stage_start = tracker.stage_start
                cap = schedule.stages[state.stage].trigger.max_steps
            else:
                stage_start, cap = 0, UNBOUNDED_STEPS
            horizon = min(cap, cfg.steps - stage_start)
            optimizer.param_groups[0]["lr"] = _lr_at(
                cfg.lr_detector, cfg.min_lr_factor, step - stage_start, horizon)
            if spn is not None:
                optimizer.param_groups[1]["lr"] = _lr_at(
                    cfg.lr_spn, cfg.min_lr_factor, step - stage_start, horizon)

            ids = rng.choice(train_idx, size=cfg.batch_samples, replace=replace)
            m = torch.as_tensor(masks_all[ids].astype(np.float32))
            m = m.permute(1, 0, 2, 3).contiguous()
            w = None
            if weights_all is not None:
                w = torch.as_tensor(weights_all[ids].astype(np.float32))
                w = w.permute(1, 0, 2, 3).contiguous()
            try:
                rec = train_step(m, w, (K_scaled, E), (detector, spn), optimizer,
                                 state, topology, sigma, multiview=cfg.multiview)
            except NumericError as e:
                dump = {"step": step, "stage": state.stage,
                        "lambda_s": state.lambda_s, "lambda_p": state.lambda_p,
                        "batch_indices": [int(i) for i in ids], "error": str(e)}
                _atomic_write_text(out / "nonfinite_dump.json",
                                   json.dumps(dump, indent=2, sort_keys=True) + "\n")
                raise NumericError(
                    f"aborting at step {step}: {e} "
                    f"(diagnostics in {out / 'nonfinite_dump.json'})") from e

            tracker.record(rec["total"])
            log_f.write(json.dumps(
                {"step": step, "stage": state.stage, "lambda_s": state.lambda_s,
                 "lambda_p": state.lambda_p, **rec}, sort_keys=True) + "\n")

            done = step + 1
            if done % cfg.eval_every == 0 or done == cfg.steps:
                err = _quick_mpjpe(detector, masks_all, eval_subset, dataset, R)
                metrics_f.write(json.dumps(
                    {"step": done, "stage": state.stage,
                     "mpjpe_triangulated_mm": err,
                     "n_eval": len(eval_subset)}, sort_keys=True) + "\n")
                metrics_f.flush()
                log_f.flush()
                if verbose:
                    print(f"[fit] step {done}: loss {rec['total']:.5f}, "
                          f"eval mpjpe {err:.1f}mm, stage {state.stage}, "
                          f"{(time.time() - t0):.0f}s")
            if done % cfg.checkpoint_every == 0 or done == cfg.steps:
                save(done)
    finally:
        log_f.close()
        metrics_f.close()

    if start_step >= cfg.steps and not ckpt_path.exists():
        save(start_step)
    final_err = _quick_mpjpe(detector, masks_all, list(eval_idx), dataset, R)
    final = {"step": max(cfg.steps, start_step),
             "mpjpe_triangulated_mm": final_err, "n_eval": len(eval_idx)}
    _atomic_write_text(out / "final_metrics.json",
                       json.dumps(final, indent=2, sort_keys=True) + "\n")
    if verbose:
        print(f"[fit] done: eval mpjpe {final_err:.1f}mm over {len(eval_idx)} samples")
    return {**final, "checkpoint": str(ckpt_path),
            "log": str(log_path), "out_dir": str(out)}
