"""Cascade scheduling, single optimization steps, and full fit runs."""

from __future__ import annotations

import json

import numpy as np
import pytest
import torch

from maskpose import training
from maskpose.config import TrainConfig, load_train_config, train_config_from_dict
from maskpose.errors import ConfigError, DataError, NumericError
from maskpose.geometry import ARMS_HANDS, CORE, project_points
from maskpose.models import (DetectorConfig, PoseDetector, ShapePriorNet,
                             detector_forward, load_checkpoint, restore_models,
                             save_checkpoint, spn_forward)
from maskpose.puppet import (default_puppet_spec, default_rig, make_dataset,
                             puppet_topology, sample_pose)
from maskpose.rendering import skeleton_mask
from maskpose.training import (CascadeSchedule, CascadeStage, CascadeState,
                               CascadeTracker, StageTrigger, build_schedule,
                               cascade_state, fit, train_step)

UNBOUNDED = training.UNBOUNDED_STEPS


def stage(groups, lp0, lp1, trigger, ramp=None):
    return CascadeStage(groups, 1.0, lp0, lp1, trigger, ramp_steps=ramp)


# ---------------------------------------------------------------------------
# schedule validation
# ---------------------------------------------------------------------------


def test_trigger_validation():
    with pytest.raises(ValueError):
        StageTrigger("sometimes", 10)
    with pytest.raises(ValueError):
        StageTrigger("fixed", 0)
    with pytest.raises(ValueError):
        StageTrigger("plateau", 10, window=0)
    with pytest.raises(ValueError):
        StageTrigger("plateau", 10, rel_improvement=1.5)


def test_schedule_validation():
    fixed = StageTrigger("fixed", 10)
    with pytest.raises(ValueError):
        CascadeSchedule(())
    with pytest.raises(ValueError):
        CascadeSchedule((stage((CORE,), 0.5, 1.0, fixed),))  # nonzero start
    with pytest.raises(ValueError):
        CascadeSchedule((
            stage((CORE, ARMS_HANDS), 0.0, 0.0, fixed),
            stage((CORE,), 0.0, 1.0, fixed),  # groups shrink
        ))
    with pytest.raises(ValueError):
        stage((CORE,), 0.8, 0.2, fixed)  # decreasing ramp
    with pytest.raises(ValueError):
        stage((), 0.0, 0.0, fixed)  # no groups
    with pytest.raises(ValueError):
        CascadeStage((CORE,), -1.0, 0.0, 0.0, fixed)


# ---------------------------------------------------------------------------
# cascade state resolution
# ---------------------------------------------------------------------------


def test_step_zero_is_core_only_with_zero_lambda_p():
    cfg = TrainConfig(dataset_dir="d", out_dir="o")
    st = cascade_state(0, [], build_schedule(cfg))
    assert st.stage == 0
    assert st.lambda_p == 0.0
    topo = puppet_topology()
    arms = set(topo.bones_in_groups((ARMS_HANDS,)))
    active = set(st.active_bones(topo))
    assert active
    assert not active & arms


def test_fixed_triggers_advance_exactly_at_caps():
    sched = CascadeSchedule((
        stage((CORE,), 0.0, 0.0, StageTrigger("fixed", 5)),
        stage((CORE,), 0.0, 1.0, StageTrigger("fixed", 7), ramp=7),
        stage((CORE, ARMS_HANDS), 1.0, 1.0, StageTrigger("fixed", UNBOUNDED)),
    ))
    hist = np.zeros(30)
    stages = [cascade_state(t, hist[:t], sched).stage for t in range(20)]
    assert stages == [0] * 5 + [1] * 7 + [2] * 8


def test_lambda_p_ramps_linearly_and_saturates():
    sched = CascadeSchedule((
        stage((CORE,), 0.0, 0.0, StageTrigger("fixed", 1)),
        stage((CORE,), 0.25, 0.75, StageTrigger("fixed", UNBOUNDED), ramp=10),
    ))
    hist = np.zeros(40)
    vals = [cascade_state(t, hist[:t], sched).lambda_p for t in range(1, 30)]
    for elapsed, v in enumerate(vals):
        assert v == pytest.approx(0.25 + 0.5 * min(1.0, elapsed / 10))
    assert all(b >= a for a, b in zip(vals, vals[1:]))


def test_plateau_advances_on_flat_history():
    sched = CascadeSchedule((
        stage((CORE,), 0.0, 0.0, StageTrigger("plateau", 100, window=5,
                                              rel_improvement=0.10)),
        stage((CORE,), 0.0, 1.0, StageTrigger("fixed", UNBOUNDED), ramp=10),
    ))
    hist = np.ones(50)
    assert cascade_state(9, hist[:9], sched).stage == 0
    assert cascade_state(10, hist[:10], sched).stage == 1


def test_plateau_waits_while_improving_until_cap():
    sched = CascadeSchedule((
        stage((CORE,), 0.0, 0.0, StageTrigger("plateau", 40, window=5,
                                              rel_improvement=0.10)),
        stage((CORE,), 0.0, 1.0, StageTrigger("fixed", UNBOUNDED), ramp=10),
    ))
    hist = np.exp(-0.5 * np.arange(60))  # keeps improving fast
    for t in range(40):
        assert cascade_state(t, hist[:t], sched).stage == 0
    assert cascade_state(40, hist[:40], sched).stage == 1


def test_replay_matches_incremental_tracker():
    rng = np.random.default_rng(0)
    sched = CascadeSchedule((
        stage((CORE,), 0.0, 0.0, StageTrigger("plateau", 60, window=10,
                                              rel_improvement=0.05)),
        stage((CORE,), 0.0, 1.0, StageTrigger("plateau", 80, window=10,
                                              rel_improvement=0.05), ramp=20),
        stage((CORE, ARMS_HANDS), 1.0, 1.0, StageTrigger("fixed", UNBOUNDED)),
    ))
    hist = 1.0 / (1.0 + 0.2 * np.arange(200)) + rng.uniform(0, 0.02, 200)
    tracker = CascadeTracker(sched)
    seen = set()
    prev_stage = 0
    for t in range(200):
        a = cascade_state(t, hist[:t], sched)
        b = tracker.state(t)
        assert a == b
        assert a.stage >= prev_stage  # monotone, arms never deactivate
        prev_stage = a.stage
        seen.add(a.stage)
        tracker.record(hist[t])
    assert seen == {0, 1, 2}


def test_stage_override_pins_the_stage():
    cfg = TrainConfig(dataset_dir="d", out_dir="o")
    sched = build_schedule(cfg)
    st = cascade_state(5, np.zeros(5), sched, stage_override=2)
    assert st.stage == 2
    assert st.lambda_p == sched.stages[2].lambda_p_end
    with pytest.raises(ValueError):
        cascade_state(5, np.zeros(5), sched, stage_override=3)


def test_state_misuse_errors():
    sched = build_schedule(TrainConfig(dataset_dir="d", out_dir="o"))
    with pytest.raises(ValueError):
        cascade_state(5, np.zeros(3), sched)  # history too short
    with pytest.raises(ValueError):
        cascade_state(-1, [], sched)
    tracker = CascadeTracker(sched)
    with pytest.raises(ValueError):
        tracker.state(1)  # must advance one step at a time


def test_build_schedule_default_cascade():
    cfg = TrainConfig(dataset_dir="d", out_dir="o", stage_max_steps=(100, 200))
    sched = build_schedule(cfg)
    assert len(sched.stages) == 3
    assert sched.stages[0].active_bone_groups == (CORE,)
    assert sched.stages[0].lambda_p_end == 0.0
    assert sched.stages[1].lambda_p_end == cfg.lambda_p_end
    assert set(sched.stages[2].active_bone_groups) == {CORE, ARMS_HANDS}
    assert sched.stages[0].trigger.max_steps == 100
    assert sched.stages[1].trigger.max_steps == 200


def test_build_schedule_flags():
    off = build_schedule(TrainConfig(dataset_dir="d", out_dir="o", cascade=False))
    assert len(off.stages) == 1
    assert set(off.stages[0].active_bone_groups) == {CORE, ARMS_HANDS}
    assert off.stages[0].lambda_p_start == 0.0
    assert off.stages[0].lambda_p_end == 1.0
    no_spn = build_schedule(TrainConfig(dataset_dir="d", out_dir="o", use_spn=False))
    assert all(s.lambda_p_end == 0.0 for s in no_spn.stages)


# ---------------------------------------------------------------------------
# config file handling
# ---------------------------------------------------------------------------


def test_config_roundtrip(tmp_path):
    cfg = TrainConfig(dataset_dir="data", out_dir="runs/x", seed=4, steps=77,
                      detector_widths=(8, 8, 16, 16), stage_max_steps=(10, 20))
    path = tmp_path / "cfg.json"
    path.write_text(cfg.to_json())
    assert load_train_config(path) == cfg


def test_config_rejections(tmp_path):
    with pytest.raises(ConfigError):
        train_config_from_dict({"dataset_dir": "d", "out_dir": "o", "bogus": 1})
    with pytest.raises(ConfigError):
        train_config_from_dict({"dataset_dir": "d"})  # out_dir missing
    with pytest.raises(ConfigError):
        train_config_from_dict({"dataset_dir": "d", "out_dir": "o",
                                "version": "maskpose-train-v9"})
    for bad in ({"steps": 0}, {"eval_fraction": 1.2}, {"plateau_rel": 0.0},
                {"depth_range": (4000.0, 2000.0)}, {"stage_max_steps": (1, 2, 3)},
                {"lr_detector": -1e-3}, {"sigma_px": 0.0}):
        with pytest.raises(ConfigError):
            train_config_from_dict({"dataset_dir": "d", "out_dir": "o", **bad})
    missing = tmp_path / "absent.json"
    with pytest.raises(ConfigError):
        load_train_config(missing)
    broken = tmp_path / "broken.json"
    broken.write_text("{not json")
    with pytest.raises(ConfigError):
        load_train_config(broken)


def test_sigma_default_tracks_resolution():
    base = dict(dataset_dir="d", out_dir="o")
    assert TrainConfig(**base, render_resolution=64).sigma == pytest.approx(1.25)
    assert TrainConfig(**base, render_resolution=128).sigma == pytest.approx(2.5)
    assert TrainConfig(**base, sigma_px=3.0).sigma == 3.0


# ---------------------------------------------------------------------------
# train_step
# ---------------------------------------------------------------------------


def tiny_detector(size: int, widths=(8, 8, 16, 16), grid=None) -> PoseDetector:
    if grid is None:
        grid = (size // 4, size // 4)
    return PoseDetector(DetectorConfig(
        input_size=(size, size), n_joints=18, depth_bins=4, grid_size=grid,
        widths=widths, groups=4, depth_range=(2000.0, 4000.0)))


def consistent_batch(size: int, n_views: int, sigma: float):
    """Masks rendered from one true pose: a target the losses can reach.

    The pose is sampled rather than the rest T-pose; a symmetric pose under
    symmetric cameras makes left/right flips strong attractors, which is a
    training-dynamics story, not what these unit tests probe.
    """
    rig = default_rig(n_views=n_views)
    spec = default_puppet_spec()
    pose = sample_pose(np.random.default_rng(4), spec).coords
    K, E = rig.camera_tensors(torch.float32)
    s = size / rig.views[0].image_size[0]
    S = torch.tensor([[s, 0.0, 0.0], [0.0, s, 0.0], [0.0, 0.0, 1.0]])
    K = S @ K
    X = torch.as_tensor(pose, dtype=torch.float32)
    obs = project_points(X.expand(n_views, *X.shape), K @ E)  # (V, J, 2)
    masks = skeleton_mask(obs.unsqueeze(1), spec.topology, sigma, (size, size))
    return masks, (K, E), spec.topology


def run_tiny_steps(seed: int, n_steps: int, lambda_p: float = 0.5):
    masks, cams, topo = consistent_batch(size=16, n_views=2, sigma=1.0)
    torch.manual_seed(seed)
    detector = tiny_detector(16)
    spn = ShapePriorNet(base_width=8, groups=4)
    opt = torch.optim.Adam([{"params": detector.parameters(), "lr": 1e-3},
                            {"params": spn.parameters(), "lr": 1e-3}])
    state = CascadeState(0, (CORE, ARMS_HANDS), 1.0, lambda_p)
    return [train_step(masks, None, cams, (detector, spn), opt, state, topo,
                       1.0, multiview=True) for _ in range(n_steps)]


def test_train_step_deterministic_loss_log():
    first = run_tiny_steps(7, 100)
    second = run_tiny_steps(7, 100)
    assert first == second  # bitwise: records are plain floats


def test_spn_frozen_while_lambda_p_is_zero():
    masks, cams, topo = consistent_batch(size=16, n_views=2, sigma=1.0)
    torch.manual_seed(3)
    detector = tiny_detector(16)
    spn = ShapePriorNet(base_width=8, groups=4)
    opt = torch.optim.Adam([{"params": detector.parameters(), "lr": 1e-3},
                            {"params": spn.parameters(), "lr": 1e-3}])
    spn_before = {k: v.clone() for k, v in spn.state_dict().items()}
    det_before = {k: v.clone() for k, v in detector.state_dict().items()}
    state = CascadeState(0, (CORE,), 1.0, 0.0)
    for _ in range(3):
        train_step(masks, None, cams, (detector, spn), opt, state, topo, 1.0)
    assert all(torch.equal(v, spn.state_dict()[k]) for k, v in spn_before.items())
    assert any(not torch.equal(v, detector.state_dict()[k])
               for k, v in det_before.items())


def test_train_step_needs_spn_when_lambda_p_positive():
    masks, cams, topo = consistent_batch(size=16, n_views=2, sigma=1.0)
    torch.manual_seed(0)
    detector = tiny_detector(16)
    opt = torch.optim.Adam(detector.parameters(), lr=1e-3)
    state = CascadeState(0, (CORE,), 1.0, 0.5)
    with pytest.raises(ValueError, match="shape prior"):
        train_step(masks, None, cams, (detector, None), opt, state, topo, 1.0)


def test_train_step_rejects_nonfinite_loss():
    masks, cams, topo = consistent_batch(size=16, n_views=2, sigma=1.0)
    masks = masks.clone()
    masks[0, 0, 3, 3] = float("nan")
    torch.manual_seed(0)
    detector = tiny_detector(16)
    before = {k: v.clone() for k, v in detector.state_dict().items()}
    opt = torch.optim.Adam(detector.parameters(), lr=1e-3)
    state = CascadeState(0, (CORE,), 1.0, 0.0)
    with pytest.raises(NumericError, match="non-finite"):
        train_step(masks, None, cams, (detector, None), opt, state, topo, 1.0)
    # the bad step must not touch parameters
    assert all(torch.equal(v, detector.state_dict()[k]) for k, v in before.items())


@pytest.mark.benchmark
def test_single_sample_overfit_reaches_five_percent():
    masks, cams, topo = consistent_batch(size=32, n_views=4, sigma=1.0)
    torch.manual_seed(1)
    detector = tiny_detector(32, widths=(8, 16, 32, 32), grid=(16, 16))
    opt = torch.optim.Adam(detector.parameters(), lr=3e-3)
    state = CascadeState(0, (CORE, ARMS_HANDS), 1.0, 0.0)
    records = [train_step(masks, None, cams, (detector, None), opt, state,
                          topo, 1.0, multiview=True) for _ in range(3000)]
    assert records[-1]["total"] <= 0.05 * records[0]["total"]


def test_checkpoint_roundtrip_reproduces_outputs(tmp_path):
    torch.manual_seed(5)
    detector = tiny_detector(16)
    spn = ShapePriorNet(base_width=8, groups=4)
    path = tmp_path / "ck.pt"
    save_checkpoint(path, detector, spn, step=12, stage=1)
    det2, spn2 = restore_models(load_checkpoint(path))
    probe = torch.rand(2, 3, 16, 16)
    with torch.no_grad():
        a = detector_forward(detector, probe)[1]
        b = detector_forward(det2, probe)[1]
        sa = spn_forward(spn, probe[:, :1])
        sb = spn_forward(spn2, probe[:, :1])
    assert torch.equal(a, b)
    assert torch.equal(sa, sb)


# ---------------------------------------------------------------------------
# fit
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def tiny_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("trainset")
    make_dataset(root, n_samples=8, seed=21)
    return root


def small_config(dataset_dir, out_dir, **over) -> TrainConfig:
    base = dict(dataset_dir=str(dataset_dir), out_dir=str(out_dir), seed=3,
                steps=30, batch_samples=2, render_resolution=32, depth_bins=4,
                detector_widths=(8, 8, 16, 16), detector_groups=4, spn_width=8,
                spn_groups=4, eval_every=10, eval_samples=2, checkpoint_every=10,
                eval_fraction=0.25, stage_max_steps=(10, 10))
    base.update(over)
    return TrainConfig(**base)


def read_jsonl(path):
    return [json.loads(line) for line in path.read_text().splitlines() if line.strip()]


def test_fit_smoke_writes_everything(tiny_dataset, tmp_path):
    out = tmp_path / "run"
    cfg = small_config(tiny_dataset, out)
    summary = fit(cfg, resume=False)

    records = read_jsonl(out / "log.jsonl")
    assert [r["step"] for r in records] == list(range(30))
    keys = {"step", "stage", "lambda_s", "lambda_p", "total", "l_skel",
            "l_physo", "l_mv"}
    assert all(keys <= set(r) for r in records)
    assert all(np.isfinite(r["total"]) for r in records)

    # plateau windows (500) exceed the caps (10), so stages flip at the caps
    assert [r["stage"] for r in records] == [0] * 10 + [1] * 10 + [2] * 10
    assert records[0]["lambda_p"] == 0.0
    for s in (0, 1, 2):
        lams = [r["lambda_p"] for r in records if r["stage"] == s]
        assert all(b >= a for a, b in zip(lams, lams[1:]))
    assert records[15]["lambda_p"] == pytest.approx(1.0)  # ramp over 5 steps

    evals = read_jsonl(out / "metrics.jsonl")
    assert [e["step"] for e in evals] == [10, 20, 30]
    assert all(np.isfinite(e["mpjpe_triangulated_mm"]) for e in evals)

    doc = load_checkpoint(out / "checkpoint.pt")
    assert doc["step"] == 30
    assert doc["stage"] == 2
    assert doc["config"]["steps"] == 30
    detector, spn = restore_models(doc)
    assert spn is not None
    assert detector.cfg.input_size == (32, 32)

    assert load_train_config(out / "config.json") == cfg
    final = json.loads((out / "final_metrics.json").read_text())
    assert final["mpjpe_triangulated_mm"] == summary["mpjpe_triangulated_mm"]
    assert summary["n_eval"] == 2


def test_fit_resume_matches_uninterrupted_run(tiny_dataset, tmp_path, monkeypatch):
    straight = small_config(tiny_dataset, tmp_path / "a", steps=45)
    fit(straight, resume=False)

    # crash the second run right after step 30 (checkpoint lands at 30),
    # then resume it and demand the full log matches the uninterrupted run
    real_step = training.train_step
    calls = {"n": 0}

    def interrupting(*args, **kwargs):
        if calls["n"] == 31:
            raise RuntimeError("simulated crash")
        calls["n"] += 1
        return real_step(*args, **kwargs)

    monkeypatch.setattr(training, "train_step", interrupting)
    resumed_cfg = small_config(tiny_dataset, tmp_path / "b", steps=45)
    with pytest.raises(RuntimeError, match="simulated crash"):
        fit(resumed_cfg, resume=False)
    monkeypatch.setattr(training, "train_step", real_step)
    fit(resumed_cfg, resume=True)

    rec_a = read_jsonl(tmp_path / "a" / "log.jsonl")
    rec_b = read_jsonl(tmp_path / "b" / "log.jsonl")
    assert [r["step"] for r in rec_b] == list(range(45))
    assert rec_b == rec_a  # every step replays bitwise, including rewound ones

    fin_a = json.loads((tmp_path / "a" / "final_metrics.json").read_text())
    fin_b = json.loads((tmp_path / "b" / "final_metrics.json").read_text())
    assert fin_a["mpjpe_triangulated_mm"] == fin_b["mpjpe_triangulated_mm"]
    assert load_checkpoint(tmp_path / "b" / "checkpoint.pt")["step"] == 45


def test_fit_ablation_paths_run(tiny_dataset, tmp_path):
    out = tmp_path / "plain"
    cfg = small_config(tiny_dataset, out, steps=4, use_spn=False,
                       use_geodesic=False, multiview=False, cascade=False,
                       eval_every=4, checkpoint_every=4)
    fit(cfg, resume=False)
    records = read_jsonl(out / "log.jsonl")
    assert all(r["lambda_p"] == 0.0 for r in records)
    assert all(r["l_mv"] == 0.0 for r in records)
    doc = load_checkpoint(out / "checkpoint.pt")
    _, spn = restore_models(doc)
    assert spn is None


def test_fit_missing_dataset_fails_before_any_step(tmp_path):
    cfg = small_config(tmp_path / "nowhere", tmp_path / "out")
    with pytest.raises(DataError):
        fit(cfg, resume=False)
    assert not (tmp_path / "out").exists()


def test_fit_rejects_resolution_mismatch(tiny_dataset, tmp_path):
    cfg = small_config(tiny_dataset, tmp_path / "out", render_resolution=48)
    with pytest.raises(ConfigError, match="divide"):
        fit(cfg, resume=False)


def test_fit_multiview_needs_two_views(tmp_path):
    root = tmp_path / "oneview"
    make_dataset(root, n_samples=2, seed=5, rig=default_rig(n_views=1))
    cfg = small_config(root, tmp_path / "out", multiview=True)
    with pytest.raises(ConfigError, match="view"):
        fit(cfg, resume=False)


def test_fit_nonfinite_dump(monkeypatch, tiny_dataset, tmp_path):
    def boom(*args, **kwargs):
        raise NumericError("non-finite training loss (forced)")

    monkeypatch.setattr(training, "train_step", boom)
    out = tmp_path / "out"
    cfg = small_config(tiny_dataset, out, steps=3, use_geodesic=False)
    with pytest.raises(NumericError, match="diagnostics"):
        fit(cfg, resume=False)
    dump = json.loads((out / "nonfinite_dump.json").read_text())
    assert dump["step"] == 0
    assert len(dump["batch_indices"]) == cfg.batch_samples
    assert "lambda_p" in dump
