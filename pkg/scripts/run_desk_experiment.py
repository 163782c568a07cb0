#!/usr/bin/env python3
"""Drive the full desk-scale experiment through the CLI and summarize it.

Generates the synthetic datasets (skipped if already present), runs the
two-round adaptation, then reports the target-validation mIoU trajectory
and the adaptation gain over the pretrain-only baseline.
"""

import argparse
import sys
from pathlib import Path

from tribranch.cli import main as cli
from tribranch.config import load_config


def stage_mious(metrics_path: Path) -> dict[str, float]:
    mious = {}
    for line in metrics_path.read_text().splitlines():
        name, value = line.rsplit(" ", 1)
        if name.endswith(".miou"):
            mious[name.removesuffix(".miou")] = float(value)
    return mious


def run(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config", default="configs/desk.yaml")
    ap.add_argument("--seed", type=int, help="override the configured seed")
    ap.add_argument("--resume", action="store_true", help="continue an interrupted run")
    args = ap.parse_args(argv)

    cfg = load_config(args.config)
    seed_flags = [] if args.seed is None else ["--seed", str(args.seed)]

    if not Path(cfg.paths.source).is_dir():
        code = cli(["generate-data", "--config", args.config])
        if code:
            return code
    else:
        print(f"reusing datasets under {Path(cfg.paths.source).parent}")

    adapt_args = ["adapt", "--config", args.config] + seed_flags
    if args.resume:
        adapt_args.append("--resume")
    code = cli(adapt_args)
    if code:
        return code

    seed = cfg.train.seed if args.seed is None else args.seed
    run_dir = Path(cfg.output.root) / f"{cfg.output.tag}-seed{seed}"
    mious = stage_mious(run_dir / "metrics.txt")
    baseline = mious["pretrain"]
    print()
    print(f"target-validation mIoU by stage ({run_dir}):")
    for stage, value in mious.items():
        delta = "" if stage == "pretrain" else f"  ({value - baseline:+.3f} vs pretrain)"
        print(f"  {stage:10s} {value:.3f}{delta}")
    return 0


if __name__ == "__main__":
    sys.exit(run())
