"""Learned vs frozen C8 canonicalizer vs plain CNN on glyphs with C8 test rotations.

Usage: python3 scripts/glyph_ablation.py [--seeds 0,1,2] [--set key=value ...]
Training glyphs are upright and unaugmented; test glyphs are randomly rotated.
"""
import argparse
import logging
from pathlib import Path

from eqcanon.experiments import format_runs, medians, run_ablation

CONFIG = Path(__file__).resolve().parents[1] / "configs" / "glyphs.cfg"


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", default="0,1,2")
    ap.add_argument("--modes", default="learned,frozen,none")
    ap.add_argument("--set", action="append", default=[], dest="overrides")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    runs = run_ablation(CONFIG, args.modes.split(","), [int(s) for s in args.seeds.split(",")], args.overrides)
    for r in runs:
        r.metric = 100.0 * (1.0 - r.metric)
    print("test error (%)")
    print(format_runs(runs, "metric"))
    med = medians(runs)
    if {"learned", "frozen", "none"} <= med.keys():
        print(f"learned <= frozen: {med['learned'] <= med['frozen']}")
        print(f"none - learned = {med['none'] - med['learned']:.2f} points (target >= 5)")
    print(f"total {sum(r.seconds for r in runs):.0f}s")


if __name__ == "__main__":
    main()
