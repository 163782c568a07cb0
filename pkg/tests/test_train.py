"""Trainer behavior: descent, parameter isolation, failure guards,
stage validation cadence, resume, and bit-level run determinism.

Everything here runs on a deliberately tiny architecture and scene set
so the whole module stays in the few-second range.
"""

import json

import numpy as np
import pytest

from tribranch.data import SceneGenConfig, generate_scenes
from tribranch.losses import class_weights, weight_constraint
from tribranch.model import ArchSpec, FctnModel
from tribranch.train import (
    DivergenceError,
    RunLog,
    TrainConfig,
    ZeroCoverageError,
    curriculum_round,
    pretrain,
    run_adaptation,
)

TINY_SPEC = ArchSpec(
    base_layers=((4, 3, 1), (6, 3, 2)),
    branch_layers=((4, 3, 2), (8, 1, 1)),
    num_classes=8,
    input_channels=3,
)

TINY_CFG = dict(
    alpha=10.0,
    beta=1.0,
    learning_rate=1e-4,
    pretrain_iters=6,
    rounds=2,
    steps_per_round=4,
    batch_size=2,
    threshold=1e-6,  # agreement-only labeling; tiny nets never reach 0.95
    seed=3,
    checkpoint_every=0,
)


@pytest.fixture(scope="module")
def scenes(tmp_path_factory):
    root = tmp_path_factory.mktemp("scenes")
    cfg = SceneGenConfig(seed=11, count=8, height=32, width=64)
    source = generate_scenes(cfg, "source", root / "source")
    target = generate_scenes(cfg, "target", root / "target")
    val_cfg = SceneGenConfig(seed=12, count=4, height=32, width=64)
    target_val = generate_scenes(val_cfg, "target", root / "target_val")
    return source, target, target_val


def snapshot(model):
    return {name: p.data.copy() for name, p in model.params.items()}


def changed(before, model, names):
    return [n for n in names if not np.array_equal(before[n], model.params.get(n).data)]


# -- config validation -------------------------------------------------------------


@pytest.mark.parametrize(
    "bad",
    [
        dict(rounds=0),
        dict(pretrain_iters=-1),
        dict(batch_size=0),
        dict(learning_rate=0.0),
        dict(threshold=0.0),
        dict(threshold=1.5),
        dict(checkpoint_every=-5),
        dict(update_mode="interleaved"),
    ],
)
def test_config_rejects_bad_values(bad):
    with pytest.raises(ValueError):
        TrainConfig(**bad)


# -- pretraining --------------------------------------------------------------------


def test_zero_iteration_pretrain_is_a_no_op(scenes):
    source, _, _ = scenes
    model = FctnModel.create(TINY_SPEC, seed=0)
    before = snapshot(model)
    cfg = TrainConfig(**{**TINY_CFG, "pretrain_iters": 0})
    log = RunLog()
    pretrain(model, source, cfg, log)
    assert changed(before, model, model.params.names()) == []
    assert log.of_kind("step") == []


def test_pretrain_descends(scenes):
    source, _, _ = scenes
    model = FctnModel.create(TINY_SPEC, seed=0)
    cfg = TrainConfig(**{**TINY_CFG, "pretrain_iters": 40})
    log = RunLog()
    pretrain(model, source, cfg, log)
    steps = log.of_kind("step")
    assert len(steps) == 40
    first = np.mean([s["total"] for s in steps[:5]])
    last = np.mean([s["total"] for s in steps[-5:]])
    assert last < first
    # every step updates every parameter group (all branches see source)
    assert all(s["target_ce"] is None for s in steps)


def test_pretrain_drives_branch_kernels_apart(scenes):
    source, _, _ = scenes
    model = FctnModel.create(TINY_SPEC, seed=0)
    start = float(weight_constraint(model).data)
    cfg = TrainConfig(**{**TINY_CFG, "pretrain_iters": 30, "alpha": 50.0})
    pretrain(model, source, cfg, RunLog())
    end = float(weight_constraint(model).data)
    assert end < start


@pytest.mark.filterwarnings("ignore:overflow encountered")
def test_divergence_guard_raises(scenes):
    # Saturated softmax/log inputs are caught by op domain checks; the
    # trainer guard covers value overflow, e.g. an alpha too large for
    # 32-bit arithmetic blowing the weight term up to infinity.
    source, _, _ = scenes
    model = FctnModel.create(TINY_SPEC, seed=0)
    cfg = TrainConfig(**{**TINY_CFG, "alpha": 1e39})
    with pytest.raises(DivergenceError, match="pretrain step 1"):
        pretrain(model, source, cfg, RunLog())


# -- curriculum rounds ----------------------------------------------------------------


def pretrained_model(source, steps=10):
    model = FctnModel.create(TINY_SPEC, seed=0)
    cfg = TrainConfig(**{**TINY_CFG, "pretrain_iters": steps})
    pretrain(model, source, cfg, RunLog())
    return model


def test_round_with_zero_beta_leaves_target_branch_alone(scenes):
    source, target, _ = scenes
    model = pretrained_model(source)
    before = snapshot(model)
    cfg = TrainConfig(**{**TINY_CFG, "beta": 0.0})
    weights = class_weights(source.masks, TINY_SPEC.num_classes)
    curriculum_round(model, source, target, cfg, 1, weights, RunLog())
    t_names = model.namespace_params("branch_t")
    assert changed(before, model, t_names) == []
    assert changed(before, model, model.namespace_params("base")) != []


def test_round_trains_target_branch_when_beta_positive(scenes):
    source, target, _ = scenes
    model = pretrained_model(source)
    before = snapshot(model)
    cfg = TrainConfig(**TINY_CFG)
    weights = class_weights(source.masks, TINY_SPEC.num_classes)
    summary = curriculum_round(model, source, target, cfg, 1, weights, RunLog())
    assert changed(before, model, model.namespace_params("branch_t")) != []
    assert summary.total_labeled > 0


def test_sequential_mode_matches_joint_logging_shape(scenes):
    source, target, _ = scenes
    model = pretrained_model(source)
    cfg = TrainConfig(**{**TINY_CFG, "update_mode": "sequential"})
    weights = class_weights(source.masks, TINY_SPEC.num_classes)
    log = RunLog()
    before = snapshot(model)
    curriculum_round(model, source, target, cfg, 1, weights, log)
    steps = log.of_kind("step")
    assert len(steps) == cfg.steps_per_round
    assert all(s["target_ce"] is not None for s in steps)
    assert changed(before, model, model.namespace_params("branch_t")) != []


def test_unreachable_threshold_aborts_round(scenes):
    source, target, _ = scenes
    model = pretrained_model(source, steps=2)
    cfg = TrainConfig(**{**TINY_CFG, "threshold": 1.0})
    weights = class_weights(source.masks, TINY_SPEC.num_classes)
    with pytest.raises(ZeroCoverageError, match="threshold"):
        curriculum_round(model, source, target, cfg, 1, weights, RunLog())


# -- the full schedule ---------------------------------------------------------------


def test_run_adaptation_artifacts_and_validation_cadence(scenes, tmp_path):
    source, target, target_val = scenes
    model = FctnModel.create(TINY_SPEC, seed=0)
    cfg = TrainConfig(**TINY_CFG)
    out = tmp_path / "run"
    result = run_adaptation(model, source, target, target_val, cfg, out)

    # one validation per stage: pretrain + each round
    validations = result["runlog"].of_kind("validation")
    assert [v["stage"] for v in validations] == ["pretrain", "round1", "round2"]

    progress = json.loads((out / "progress.json").read_text())
    assert progress["completed"] == ["pretrain", "round1", "round2"]
    assert set(progress["labeling"]) == {"round1", "round2"}

    for name in ("pretrain.tbn", "round1.tbn", "round2.tbn", "final.tbn"):
        assert (out / "checkpoints" / name).is_file()
    assert (
        (out / "checkpoints" / "final.tbn").read_bytes()
        == (out / "checkpoints" / "round2.tbn").read_bytes()
    )

    lines = (out / "metrics.txt").read_text().splitlines()
    # per stage: one iou line per class plus the miou line
    per_stage = TINY_SPEC.num_classes + 1
    assert len(lines) == 3 * per_stage
    assert lines[0].startswith("pretrain.iou.")
    assert lines[per_stage - 1].startswith("pretrain.miou ")
    assert lines[-1].startswith("round2.miou ")

    # run.log is one JSON object per line and covers every stage
    raw = (out / "run.log").read_text().splitlines()
    kinds = {json.loads(line)["kind"] for line in raw}
    assert {"step", "labeling", "validation"} <= kinds


def test_identical_runs_are_bit_identical(scenes, tmp_path):
    source, target, target_val = scenes
    cfg = TrainConfig(**TINY_CFG)
    outputs = []
    for tag in ("a", "b"):
        model = FctnModel.create(TINY_SPEC, seed=cfg.seed)
        result = run_adaptation(model, source, target, target_val, cfg, tmp_path / tag)
        outputs.append(result)
    a, b = outputs
    assert (
        a["final_checkpoint"].read_bytes() == b["final_checkpoint"].read_bytes()
    )
    assert a["metrics_path"].read_text() == b["metrics_path"].read_text()


def test_resume_reproduces_uninterrupted_run(scenes, tmp_path):
    source, target, target_val = scenes
    cfg = TrainConfig(**TINY_CFG)

    model = FctnModel.create(TINY_SPEC, seed=cfg.seed)
    full = run_adaptation(model, source, target, target_val, cfg, tmp_path / "full")

    # same schedule, but interrupted after round 1 and resumed
    part_cfg = TrainConfig(**{**TINY_CFG, "rounds": 1})
    model2 = FctnModel.create(TINY_SPEC, seed=cfg.seed)
    run_adaptation(model2, source, target, target_val, part_cfg, tmp_path / "split")
    model3 = FctnModel.create(TINY_SPEC, seed=cfg.seed)
    resumed = run_adaptation(
        model3, source, target, target_val, cfg, tmp_path / "split", resume=True
    )

    assert resumed["progress"]["completed"] == ["pretrain", "round1", "round2"]
    assert (
        resumed["final_checkpoint"].read_bytes()
        == full["final_checkpoint"].read_bytes()
    )
    assert resumed["metrics_path"].read_text() == full["metrics_path"].read_text()


def test_fresh_run_ignores_resume_flag_on_empty_dir(scenes, tmp_path):
    source, target, target_val = scenes
    cfg = TrainConfig(**{**TINY_CFG, "rounds": 1, "pretrain_iters": 2, "steps_per_round": 2})
    model = FctnModel.create(TINY_SPEC, seed=0)
    result = run_adaptation(
        model, source, target, target_val, cfg, tmp_path / "fresh", resume=True
    )
    assert result["progress"]["completed"] == ["pretrain", "round1"]
