"""Learned vs frozen canonicalizer vs plain GNN on charged 5-body prediction.

Usage: python3 scripts/nbody_trend.py [--seeds 0,1,2] [--set key=value ...]
Prints per-seed test MSE under random O(3) test rotations and the medians.
"""
import argparse
import logging
from pathlib import Path

from eqcanon.experiments import format_runs, medians, run_ablation

CONFIG = Path(__file__).resolve().parents[1] / "configs" / "nbody.cfg"


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", default="0,1,2")
    ap.add_argument("--modes", default="learned,frozen,none")
    ap.add_argument("--set", action="append", default=[], dest="overrides")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    runs = run_ablation(CONFIG, args.modes.split(","), [int(s) for s in args.seeds.split(",")], args.overrides)
    print(format_runs(runs, "metric"))
    med = medians(runs)
    if {"learned", "frozen", "none"} <= med.keys():
        print(f"learned < frozen: {med['learned'] < med['frozen']}")
        print(f"learned / none = {med['learned'] / med['none']:.3f} (target < 0.8)")
    print(f"total {sum(r.seconds for r in runs):.0f}s")


if __name__ == "__main__":
    main()
