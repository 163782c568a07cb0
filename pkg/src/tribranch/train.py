"""Training orchestration: pretraining on labeled source scenes, then
alternating rounds of pseudo-labeling the target set and re-training on
half-source / half-pseudo-target minibatches.

All sampling randomness is derived from (seed, stream, epoch) tuples,
never from mutable RNG state, so a run resumed from a stage-boundary
checkpoint takes exactly the steps the uninterrupted run would have.
"""

from __future__ import annotations

import json
import math
import shutil
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .data import CLASS_NAMES, Dataset, EpochSampler, sample_minibatch
from .layers import SgdOptimizer
from .losses import ClassWeights, class_weights, target_ce_loss, total_loss
from .metrics import evaluate_predictions
from .model import BRANCH_NAMES, FctnModel
from .pseudolabel import LabelingSummary, PseudoLabelConfig, label_dataset


class DivergenceError(RuntimeError):
    pass


class ZeroCoverageError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    alpha: float = 1000.0
    beta: float = 100.0
    learning_rate: float = 1e-5
    pretrain_iters: int = 2000
    rounds: int = 2
    steps_per_round: int = 1000
    batch_size: int = 4
    threshold: float = 0.95
    seed: int = 0
    checkpoint_every: int = 500  # mid-stage cadence in steps; 0 = stage ends only
    update_mode: str = "joint"  # "joint" | "sequential"

    def __post_init__(self):
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")
        if self.pretrain_iters < 0 or self.steps_per_round < 0:
            raise ValueError("iteration counts must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not (0.0 < self.threshold <= 1.0):
            raise ValueError("threshold must be in (0, 1]")
        if self.checkpoint_every < 0:
            raise ValueError("checkpoint_every must be non-negative")
        if self.update_mode not in ("joint", "sequential"):
            raise ValueError(f"unknown update_mode {self.update_mode!r}")


class RunLog:
    """Append-only structured event log, one JSON object per line."""

    def __init__(self, path=None):
        self.entries: list[dict] = []
        self._fh = open(path, "a") if path is not None else None

    def append(self, kind: str, **fields):
        entry = {"kind": kind, "ts": time.time()}
        entry.update(fields)
        self.entries.append(entry)
        if self._fh is not None:
            self._fh.write(json.dumps(entry) + "\n")
            self._fh.flush()

    def of_kind(self, kind: str) -> list[dict]:
        return [e for e in self.entries if e["kind"] == kind]

    def close(self):
        if self._fh is not None:
            self._fh.close()
            self._fh = None


def _bundle_fields(bundle) -> dict:
    return {
        "weight_similarity": float(bundle.weight_similarity.data),
        "source_ce": float(bundle.source_ce.data),
        "target_ce": None if bundle.target_ce is None else float(bundle.target_ce.data),
        "total": float(bundle.total.data),
    }


def _guard_finite(value: float, stage: str, step: int):
    if not math.isfinite(value):
        raise DivergenceError(f"non-finite loss {value} at {stage} step {step}")


def _maybe_checkpoint(model, out_dir, cfg, stage: str, step: int):
    if out_dir is None or cfg.checkpoint_every == 0:
        return
    if step % cfg.checkpoint_every == 0:
        model.save(Path(out_dir) / f"{stage}_step{step:05d}.tbn")


def pretrain(
    model: FctnModel,
    source: Dataset,
    cfg: TrainConfig,
    runlog: RunLog,
    ckpt_dir=None,
) -> None:
    """Source-only stage: every branch (including the target-specific one)
    learns from source labels, with the weight-similarity penalty active.
    Source cross-entropy is deliberately unweighted; median-frequency
    weights only rebalance the pseudo-labeled target term."""
    sampler = EpochSampler(len(source), cfg.seed, stream=1)
    opt = SgdOptimizer(cfg.learning_rate)
    for step in range(1, cfg.pretrain_iters + 1):
        batch = sample_minibatch(source, cfg.batch_size, sampler)
        bundle = total_loss(
            model, batch, alpha=cfg.alpha, source_branches=BRANCH_NAMES
        )
        _guard_finite(float(bundle.total.data), "pretrain", step)
        model.params.zero_grad()
        bundle.total.backward()
        opt.step(model.params)
        runlog.append("step", stage="pretrain", step=step, **_bundle_fields(bundle))
        _maybe_checkpoint(model, ckpt_dir, cfg, "pretrain", step)


def curriculum_round(
    model: FctnModel,
    source: Dataset,
    target,
    cfg: TrainConfig,
    round_index: int,
    weights: ClassWeights,
    runlog: RunLog,
    ckpt_dir=None,
) -> LabelingSummary:
    """One labeling + re-training round.  ``target`` needs images only."""
    stage = f"round{round_index}"
    labeled, summary = label_dataset(model, target, PseudoLabelConfig(cfg.threshold))
    runlog.append(
        "labeling",
        round=round_index,
        mean_coverage=summary.mean_coverage,
        total_labeled=summary.total_labeled,
        class_pixel_counts=summary.class_pixel_counts.tolist(),
    )
    if summary.total_labeled == 0:
        raise ZeroCoverageError(
            f"round {round_index}: no pixel cleared the agreement+confidence rule; "
            f"threshold {cfg.threshold} is too high for the current model"
        )

    src_sampler = EpochSampler(len(source), cfg.seed, stream=10 + 2 * round_index)
    tgt_sampler = EpochSampler(len(labeled), cfg.seed, stream=11 + 2 * round_index)
    opt = SgdOptimizer(cfg.learning_rate)
    labeling_params = model.namespace_params("base", "branch1", "branch2")

    for step in range(1, cfg.steps_per_round + 1):
        s_mb, t_mb = sample_minibatch(
            source, cfg.batch_size, src_sampler,
            pseudo_target=labeled, target_sampler=tgt_sampler,
        )
        if cfg.update_mode == "joint":
            bundle = total_loss(
                model, s_mb, t_mb, weights=weights, alpha=cfg.alpha, beta=cfg.beta
            )
            _guard_finite(float(bundle.total.data), stage, step)
            model.params.zero_grad()
            bundle.total.backward()
            opt.step(model.params)
            fields = _bundle_fields(bundle)
        else:
            # Two sub-updates per step: source terms into the labeling
            # pair, then the scaled target term into everything.
            bundle = total_loss(model, s_mb, alpha=cfg.alpha)
            _guard_finite(float(bundle.total.data), stage, step)
            model.params.zero_grad()
            bundle.total.backward()
            opt.step(model.params, names=labeling_params)

            t_term = target_ce_loss(model, t_mb, weights)
            scaled = t_term * cfg.beta
            _guard_finite(float(scaled.data), stage, step)
            model.params.zero_grad()
            scaled.backward()
            opt.step(model.params)
            fields = _bundle_fields(bundle)
            fields["target_ce"] = float(t_term.data)
            fields["total"] = fields["total"] + float(scaled.data)
        runlog.append("step", stage=stage, step=step, **fields)
        _maybe_checkpoint(model, ckpt_dir, cfg, stage, step)
    return summary


def _validate(model, target_val, stage: str, runlog: RunLog) -> list[str]:
    report = evaluate_predictions(model, "branch_t", target_val)
    runlog.append(
        "validation",
        stage=stage,
        miou=report.miou,
        iou=[None if np.isnan(v) else float(v) for v in report.iou],
    )
    return [f"{stage}.{line}" for line in report.lines(CLASS_NAMES)]


def run_adaptation(
    model: FctnModel,
    source: Dataset,
    target_train,
    target_val: Dataset,
    cfg: TrainConfig,
    out_dir,
    resume: bool = False,
) -> dict:
    """Full schedule: pretrain, then `rounds` labeling + re-training rounds,
    validating the target-specific branch after every stage.

    With ``resume=True``, stages recorded as completed in
    ``progress.json`` are skipped and the model continues from the last
    stage checkpoint.
    """
    out_dir = Path(out_dir)
    ckpt_dir = out_dir / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    progress_path = out_dir / "progress.json"
    metrics_path = out_dir / "metrics.txt"

    progress = {"completed": [], "metrics_lines": {}, "labeling": {}}
    if resume and progress_path.is_file():
        progress = json.loads(progress_path.read_text())
        if progress["completed"]:
            model.load(ckpt_dir / f"{progress['completed'][-1]}.tbn")

    runlog = RunLog(out_dir / "run.log")
    weights = class_weights(source.masks, model.spec.num_classes)

    def finish_stage(stage: str, metrics_lines: list[str]):
        model.save(ckpt_dir / f"{stage}.tbn")
        progress["completed"].append(stage)
        progress["metrics_lines"][stage] = metrics_lines
        progress_path.write_text(json.dumps(progress, indent=2) + "\n")
        ordered = [progress["metrics_lines"][s] for s in progress["completed"]]
        metrics_path.write_text("\n".join(line for block in ordered for line in block) + "\n")

    try:
        if "pretrain" not in progress["completed"]:
            pretrain(model, source, cfg, runlog, ckpt_dir)
            finish_stage("pretrain", _validate(model, target_val, "pretrain", runlog))
        for r in range(1, cfg.rounds + 1):
            stage = f"round{r}"
            if stage in progress["completed"]:
                continue
            summary = curriculum_round(model, source, target_train, cfg, r, weights, runlog, ckpt_dir)
            progress["labeling"][stage] = {
                "mean_coverage": summary.mean_coverage,
                "total_labeled": summary.total_labeled,
                "class_pixel_counts": summary.class_pixel_counts.tolist(),
            }
            finish_stage(stage, _validate(model, target_val, stage, runlog))
        shutil.copyfile(ckpt_dir / f"{progress['completed'][-1]}.tbn", ckpt_dir / "final.tbn")
    finally:
        runlog.close()

    return {
        "model": model,
        "runlog": runlog,
        "final_checkpoint": ckpt_dir / "final.tbn",
        "metrics_path": metrics_path,
        "progress": progress,
    }
