#!/usr/bin/env python3
"""Render loss curves and validation scores from a run.log as terminal
ASCII plots — enough to eyeball convergence without a plotting stack.
"""

import argparse
import json
import sys
from pathlib import Path


def load_entries(path: Path) -> list[dict]:
    return [json.loads(line) for line in path.read_text().splitlines() if line.strip()]


def ascii_plot(values, width=72, height=12, title=""):
    if len(values) > width:
        # average into `width` buckets
        bucket = len(values) / width
        values = [
            sum(values[int(i * bucket): max(int((i + 1) * bucket), int(i * bucket) + 1)])
            / max(int((i + 1) * bucket) - int(i * bucket), 1)
            for i in range(width)
        ]
    lo, hi = min(values), max(values)
    span = (hi - lo) or 1.0
    rows = [[" "] * len(values) for _ in range(height)]
    for x, v in enumerate(values):
        y = int((v - lo) / span * (height - 1))
        rows[height - 1 - y][x] = "*"
    print(f"{title}  [{lo:.4g} .. {hi:.4g}]")
    for row in rows:
        print("  " + "".join(row))


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("run_log", type=Path, help="run.log from a training run directory")
    ap.add_argument("--field", default="total",
                    choices=("total", "source_ce", "target_ce", "weight_similarity"),
                    help="which loss component to plot")
    args = ap.parse_args(argv)

    entries = load_entries(args.run_log)
    steps = [e for e in entries if e["kind"] == "step"]
    if not steps:
        print("no training steps logged", file=sys.stderr)
        return 1

    stages = []
    for e in steps:
        if not stages or stages[-1] != e["stage"]:
            stages.append(e["stage"])
    for stage in stages:
        values = [e[args.field] for e in steps if e["stage"] == stage and e[args.field] is not None]
        if values:
            ascii_plot(values, title=f"{stage}: {args.field} over {len(values)} steps")
            print()

    validations = [e for e in entries if e["kind"] == "validation"]
    if validations:
        print("validation mIoU:")
        for v in validations:
            print(f"  {v['stage']:10s} {v['miou']:.4f}")
    labelings = [e for e in entries if e["kind"] == "labeling"]
    if labelings:
        print("pseudo-label coverage:")
        for l in labelings:
            print(f"  round{l['round']}     {l['mean_coverage']:.4f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
