"""Inference latency: canonicalizer overhead on shapes and scaling with image group order.

Usage: python3 scripts/bench.py [--batch 1] [--reps 30] [--out DIR]
"""
import argparse
from pathlib import Path

from eqcanon.bench import benchmark_inference, growth, overhead_ratio, write_bench_csv
from eqcanon.config import load_config

CONFIG = Path(__file__).resolve().parents[1] / "configs" / "shapes.cfg"


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--batch", type=int, default=None)
    ap.add_argument("--reps", type=int, default=None)
    ap.add_argument("--out", type=Path, default=None)
    args = ap.parse_args()
    sets = [f"bench.repetitions={args.reps}"] if args.reps else []
    cfg = load_config(CONFIG, sets)
    rows = benchmark_inference(cfg, args.batch)
    for r in rows:
        print(f"{r.component:22s} n={r.group_order:<3d} batch={r.batch:<3d} {r.median_ms:9.3f} ms  iqr {r.iqr_ms:.3f}")
    print(f"canonicalizer overhead on shapes: {100 * overhead_ratio(rows):.1f}% (target < 30%)")
    print(f"image canonicalizer growth n=4..64: {growth(rows, 'image.canonicalizer'):.2f}x (target < 3x)")
    print(f"group-conv baseline growth n=4..64: {growth(rows, 'image.gcnn'):.2f}x")
    if args.out:
        args.out.mkdir(parents=True, exist_ok=True)
        write_bench_csv(rows, args.out / "bench.csv")


if __name__ == "__main__":
    main()
