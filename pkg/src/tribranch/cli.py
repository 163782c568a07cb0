"""Command-line entry point: scene generation, training, pseudo-label
inspection, evaluation, and the gradient verification suite.

Exit codes: 0 success, 2 usage (argparse), 3 bad configuration,
4 missing input path, 5 training aborted, 6 bad checkpoint,
1 verification failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

from .config import (
    ConfigError,
    RunConfig,
    apply_overrides,
    load_config,
    write_resolved,
)
from .data import CLASS_NAMES, generate_scenes, load_dataset
from .gradcheck_suite import format_results, run_suite, suite_passed
from .layers import CheckpointError
from .metrics import evaluate_predictions
from .model import BRANCH_NAMES, FctnModel
from .pseudolabel import PseudoLabelConfig, label_dataset
from .train import (
    DivergenceError,
    RunLog,
    ZeroCoverageError,
    pretrain,
    run_adaptation,
)

USAGE_EXIT = 2
CONFIG_EXIT = 3
MISSING_PATH_EXIT = 4
TRAINING_EXIT = 5
CHECKPOINT_EXIT = 6


def _add_config_flags(p: argparse.ArgumentParser):
    p.add_argument("--config", metavar="YAML", help="run configuration file")
    p.add_argument("--tag", help="run tag; outputs land in <output-root>/<tag>-seed<seed>")
    p.add_argument("--output-root", help="directory that holds per-run output directories")
    p.add_argument("--seed", type=int, help="training seed (also keys the run directory)")


def _add_train_flags(p: argparse.ArgumentParser):
    p.add_argument("--alpha", type=float, help="weight on the branch-similarity penalty")
    p.add_argument("--beta", type=float, help="weight on the pseudo-labeled target term")
    p.add_argument("--learning-rate", type=float, help="SGD learning rate")
    p.add_argument("--pretrain-iters", type=int, help="source-only training steps")
    p.add_argument("--batch-size", type=int, help="images per step")
    p.add_argument("--checkpoint-every", type=int, help="mid-stage checkpoint cadence (0 = stage ends only)")


def _add_round_flags(p: argparse.ArgumentParser):
    p.add_argument("--rounds", type=int, help="labeling + re-training rounds")
    p.add_argument("--steps-per-round", type=int, help="re-training steps per round")
    p.add_argument("--threshold", type=float, help="pseudo-label confidence threshold")
    p.add_argument("--update-mode", choices=("joint", "sequential"), help="one update per step, or source/target sub-updates")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tribranch",
        description="Tri-branch curriculum domain adaptation for semantic segmentation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate-data", help="render the synthetic source/target scene sets")
    _add_config_flags(p)
    p.add_argument("--count", type=int, help="training images per domain")
    p.add_argument("--height", type=int, help="scene height in pixels")
    p.add_argument("--width", type=int, help="scene width in pixels")
    p.add_argument("--scene-seed", type=int, help="base seed for scene layout/appearance")

    p = sub.add_parser("pretrain", help="source-only stage on labeled source scenes")
    _add_config_flags(p)
    _add_train_flags(p)

    p = sub.add_parser("adapt", help="full schedule: pretrain, then labeling + re-training rounds")
    _add_config_flags(p)
    _add_train_flags(p)
    _add_round_flags(p)
    p.add_argument("--resume", action="store_true", help="continue a run from its last completed stage")

    p = sub.add_parser("label", help="dump pseudo-label masks for a checkpoint")
    _add_config_flags(p)
    p.add_argument("--checkpoint", required=True, help="model checkpoint (.tbn)")
    p.add_argument("--dataset", help="image directory to label (default: target training set)")
    p.add_argument("--threshold", type=float, help="confidence threshold")
    p.add_argument("--out", help="output directory (default: <run-dir>/labels)")

    p = sub.add_parser("evaluate", help="IoU report for a checkpoint on a labeled dataset")
    _add_config_flags(p)
    p.add_argument("--checkpoint", required=True, help="model checkpoint (.tbn)")
    p.add_argument("--dataset", help="labeled dataset directory (default: target validation set)")
    p.add_argument("--branch", choices=BRANCH_NAMES, default="branch_t", help="which branch to score")
    p.add_argument("--out", help="also write the report lines to this file")

    p = sub.add_parser("gradcheck", help="finite-difference checks for every op and loss term")
    p.add_argument("--seed", type=int, default=0, help="seed for the random tiny instances")
    p.add_argument("--step", type=float, default=1e-5, help="central-difference step")
    p.add_argument("--tolerance", type=float, default=1e-4, help="max allowed relative error")

    return parser


def _resolve(args: argparse.Namespace) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    overrides = {
        "output.tag": getattr(args, "tag", None),
        "output.root": getattr(args, "output_root", None),
        "train.seed": getattr(args, "seed", None),
        "train.alpha": getattr(args, "alpha", None),
        "train.beta": getattr(args, "beta", None),
        "train.learning_rate": getattr(args, "learning_rate", None),
        "train.pretrain_iters": getattr(args, "pretrain_iters", None),
        "train.batch_size": getattr(args, "batch_size", None),
        "train.checkpoint_every": getattr(args, "checkpoint_every", None),
        "train.rounds": getattr(args, "rounds", None),
        "train.steps_per_round": getattr(args, "steps_per_round", None),
        "train.threshold": getattr(args, "threshold", None),
        "train.update_mode": getattr(args, "update_mode", None),
        "scenes.count": getattr(args, "count", None),
        "scenes.height": getattr(args, "height", None),
        "scenes.width": getattr(args, "width", None),
        "scenes.seed": getattr(args, "scene_seed", None),
    }
    return apply_overrides(cfg, overrides)


def _load_labeled(path, what: str, with_masks: bool = True):
    root = Path(path)
    if not root.is_dir():
        raise FileNotFoundError(f"{what} directory not found: {root}")
    return load_dataset(root, with_masks=with_masks)


def _load_model(cfg: RunConfig, checkpoint) -> FctnModel:
    ckpt = Path(checkpoint)
    if not ckpt.is_file():
        raise FileNotFoundError(f"checkpoint not found: {ckpt}")
    model = FctnModel.create(cfg.arch, seed=cfg.train.seed)
    model.load(ckpt)
    return model


def _cmd_generate_data(args) -> int:
    cfg = _resolve(args)
    base = cfg.scenes
    val_count = max(1, base.count // 4)
    jobs = [
        (base, "source", cfg.paths.source),
        (dataclasses.replace(base, seed=base.seed + 1), "target", cfg.paths.target_train),
        (dataclasses.replace(base, seed=base.seed + 2, count=val_count), "target", cfg.paths.target_val),
    ]
    for gen_cfg, domain, out in jobs:
        ds = generate_scenes(gen_cfg, domain, out)
        print(f"wrote {len(ds)} {domain} scenes to {out}")
    write_resolved(cfg, Path(cfg.paths.source).parent)
    return 0


def _metrics_and_log(run_dir: Path):
    run_dir.mkdir(parents=True, exist_ok=True)
    return run_dir / "metrics.txt", RunLog(run_dir / "run.log")


def _cmd_pretrain(args) -> int:
    cfg = _resolve(args)
    source = _load_labeled(cfg.paths.source, "source dataset")
    target_val = _load_labeled(cfg.paths.target_val, "target validation dataset")
    run_dir = cfg.run_dir
    write_resolved(cfg, run_dir)
    metrics_path, runlog = _metrics_and_log(run_dir)
    ckpt_dir = run_dir / "checkpoints"
    ckpt_dir.mkdir(exist_ok=True)

    model = FctnModel.create(cfg.arch, seed=cfg.train.seed)
    try:
        pretrain(model, source, cfg.train, runlog, ckpt_dir)
    finally:
        runlog.close()
    model.save(ckpt_dir / "pretrain.tbn")
    report = evaluate_predictions(model, "branch_t", target_val)
    lines = [f"pretrain.{line}" for line in report.lines(CLASS_NAMES)]
    metrics_path.write_text("\n".join(lines) + "\n")
    print("\n".join(lines))
    print(f"checkpoint: {ckpt_dir / 'pretrain.tbn'}")
    return 0


def _cmd_adapt(args) -> int:
    cfg = _resolve(args)
    source = _load_labeled(cfg.paths.source, "source dataset")
    # the target training set is loaded unlabeled: its ground truth must
    # never be visible to the curriculum, only to post-hoc evaluation
    target_train = _load_labeled(cfg.paths.target_train, "target training dataset", with_masks=False)
    target_val = _load_labeled(cfg.paths.target_val, "target validation dataset")
    run_dir = cfg.run_dir
    write_resolved(cfg, run_dir)

    model = FctnModel.create(cfg.arch, seed=cfg.train.seed)
    result = run_adaptation(
        model, source, target_train, target_val, cfg.train, run_dir, resume=args.resume
    )
    print(Path(result["metrics_path"]).read_text(), end="")
    print(f"final checkpoint: {result['final_checkpoint']}")
    return 0


def _cmd_label(args) -> int:
    cfg = _resolve(args)
    model = _load_model(cfg, args.checkpoint)
    dataset = _load_labeled(args.dataset or cfg.paths.target_train, "dataset", with_masks=False)
    labeled, summary = label_dataset(model, dataset, PseudoLabelConfig(cfg.train.threshold))
    out = Path(args.out) if args.out else cfg.run_dir / "labels"
    labeled.export_masks(out)
    (out / "summary.json").write_text(json.dumps({
        "checkpoint": str(args.checkpoint),
        "threshold": cfg.train.threshold,
        "images": len(labeled.images),
        "mean_coverage": summary.mean_coverage,
        "total_labeled": summary.total_labeled,
        "total_pixels": summary.total_pixels,
        "class_pixel_counts": summary.class_pixel_counts.tolist(),
    }, indent=2) + "\n")
    write_resolved(cfg, out)
    print(f"labeled {len(labeled.images)} images, mean coverage {summary.mean_coverage:.3f}")
    print(f"masks written to {out}")
    return 0


def _cmd_evaluate(args) -> int:
    cfg = _resolve(args)
    model = _load_model(cfg, args.checkpoint)
    dataset = _load_labeled(args.dataset or cfg.paths.target_val, "dataset")
    if dataset.masks is None:
        raise FileNotFoundError(f"dataset has no ground-truth masks: {args.dataset}")
    report = evaluate_predictions(model, args.branch, dataset)
    lines = report.lines(CLASS_NAMES)
    print("\n".join(lines))
    if args.out:
        Path(args.out).write_text("\n".join(lines) + "\n")
    return 0


def _cmd_gradcheck(args) -> int:
    results = run_suite(seed=args.seed, step=args.step, tolerance=args.tolerance)
    print("\n".join(format_results(results)))
    return 0 if suite_passed(results) else 1


_COMMANDS = {
    "generate-data": _cmd_generate_data,
    "pretrain": _cmd_pretrain,
    "adapt": _cmd_adapt,
    "label": _cmd_label,
    "evaluate": _cmd_evaluate,
    "gradcheck": _cmd_gradcheck,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return CONFIG_EXIT
    except FileNotFoundError as exc:
        print(f"missing path: {exc}", file=sys.stderr)
        return MISSING_PATH_EXIT
    except (DivergenceError, ZeroCoverageError) as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        return TRAINING_EXIT
    except CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return CHECKPOINT_EXIT


if __name__ == "__main__":
    sys.exit(main())
