"""Multi-seed ablation runs shared by the scripts and the acceptance suite."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass

import numpy as np

from .config import load_config
from .training import evaluate, make_split, train

log = logging.getLogger(__name__)


@dataclass
class AblationRun:
    mode: str
    seed: int
    loss: float  # test loss under the configured evaluation transform
    metric: float  # accuracy for classification, mse for regression
    seconds: float


def run_ablation(config_path, modes, seeds, overrides=()) -> list[AblationRun]:
    """Train and evaluate every (mode, seed) pair; test data is generated once per mode."""
    runs = []
    for mode in modes:
        for seed in seeds:
            cfg = load_config(config_path, list(overrides) + [f"ablation_mode={mode}", f"training.seed={seed}"])
            t0 = time.perf_counter()
            res = train(cfg)
            row = evaluate(cfg, res.model, data=make_split(cfg, cfg.eval.split))
            runs.append(AblationRun(mode, seed, row[2], row[3], time.perf_counter() - t0))
            log.info("%s seed %d: loss %.6f metric %.6f (%.1fs)", mode, seed, row[2], row[3], runs[-1].seconds)
    return runs


def medians(runs: list[AblationRun], field: str = "metric") -> dict[str, float]:
    out = {}
    for r in runs:
        out.setdefault(r.mode, []).append(getattr(r, field))
    return {k: float(np.median(v)) for k, v in out.items()}


def format_runs(runs: list[AblationRun], field: str = "metric") -> str:
    seeds = sorted({r.seed for r in runs})
    modes = list(dict.fromkeys(r.mode for r in runs))
    table = {(r.mode, r.seed): getattr(r, field) for r in runs}
    lines = ["mode      " + "".join(f"seed {s:<8d}" for s in seeds) + "median"]
    med = medians(runs, field)
    for m in modes:
        vals = "".join(f"{table[m, s]:<13.6f}" for s in seeds)
        lines.append(f"{m:<10s}{vals}{med[m]:.6f}")
    return "\n".join(lines)
