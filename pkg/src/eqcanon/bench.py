"""Inference-latency benchmarks: canonicalizer overhead and scaling with group order."""
from __future__ import annotations

import csv
import time
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .canonicalization import ImageCanonicalizer
from .config import ExperimentConfig
from .groups import parse_group, rotate_image_angle
from .tasks import gen_glyphs, gen_shapes
from .tensor import ParameterStore, Tensor
from .training import build_model

BENCH_COLUMNS = ["component", "group_order", "batch", "median_ms", "iqr_ms", "repetitions"]


@dataclass
class Timing:
    component: str
    group_order: int
    batch: int
    median_ms: float
    iqr_ms: float
    repetitions: int


def time_call(fn, repetitions: int = 20, warmup: int = 3) -> tuple[float, float]:
    """Median and interquartile range of wall time in milliseconds."""
    if repetitions < 1:
        raise ValueError("need at least one repetition")
    for _ in range(warmup):
        fn()
    ts = np.empty(repetitions)
    for i in range(repetitions):
        t0 = time.perf_counter()
        fn()
        ts[i] = (time.perf_counter() - t0) * 1e3
    q1, med, q3 = np.percentile(ts, [25, 50, 75])
    return float(med), float(q3 - q1)


class GCNNBaseline:
    """Spatial G-CNN on Cn: lifting conv plus one group conv, global pooling.

    The group conv holds ``|G| x |G|`` filter blocks, so its cost grows
    quadratically with the group order.
    """

    def __init__(self, n: int, rng: np.random.Generator, in_channels: int = 1, channels: int = 4,
                 kernel: int = 3, n_classes: int = 8):
        self.n = n
        k = kernel
        base = rng.uniform(-1, 1, size=(channels, in_channels, k, k)) / np.sqrt(in_channels * k * k)
        gbase = rng.uniform(-1, 1, size=(channels, channels, n, k, k)) / np.sqrt(channels * n * k * k)
        angles = 2 * np.pi * np.arange(n) / n
        lift = [np.stack([rotate_image_angle(f, a) for f in base]) for a in angles]
        self.lift = np.concatenate(lift, axis=0)  # (n*O, C, k, k)
        G = np.zeros((n, channels, n, channels, k, k))
        for m, a in enumerate(angles):
            for j in range(n):
                # output rotation m reads input fiber m + j with the filter rotated by m
                blk = gbase[:, :, j].reshape(channels * channels, k, k)
                rot = rotate_image_angle(blk, a).reshape(channels, channels, k, k)
                G[m, :, (m + j) % n] = rot
        self.gconv = G.reshape(n * channels, n * channels, k, k)
        self.head = rng.uniform(-1, 1, size=(channels, n_classes)) / np.sqrt(channels)
        self.kernel = kernel
        self.channels = channels

    def __call__(self, images) -> Tensor:
        x = T.as_tensor(images)
        p = self.kernel // 2
        h = T.relu(T.conv2d(x, Tensor(self.lift), stride=2, padding=p))
        h = T.relu(T.conv2d(h, Tensor(self.gconv), stride=2, padding=p))
        B = h.shape[0]
        h = T.reshape(h, (B, self.n, self.channels, h.shape[-2] * h.shape[-1]))
        pooled = h.data.mean(axis=(1, 3))  # invariant: average over fiber and space
        return Tensor(pooled @ self.head)


def bench_shapes(cfg: ExperimentConfig, batch: int, repetitions: int) -> list[Timing]:
    m = build_model(cfg)
    X = gen_shapes(batch, cfg.task.n_points, cfg.task.n_classes, seed=cfg.task.seed).points
    with T.no_grad():
        O, t = m.h(X)
        Xc = T.matmul(Tensor(X) - T.broadcast_to(T.reshape(t, (batch, 1, 3)), X.shape), O).data
        out = []
        for name, fn in [("shapes.predictor", lambda: m.f(Xc)),
                         ("shapes.canonicalizer", lambda: m.h(X)),
                         ("shapes.pipeline", lambda: m(X))]:
            med, iqr = time_call(fn, repetitions)
            out.append(Timing(name, 0, batch, med, iqr, repetitions))
    return out


def bench_orders(cfg: ExperimentConfig, orders: list[int], batch: int, repetitions: int,
                 include_gcnn: bool = True) -> list[Timing]:
    imgs = gen_glyphs(batch, seed=cfg.task.seed).images
    channels = tuple(int(c) for c in cfg.model.canon_channels.split(","))
    out = []
    with T.no_grad():
        for n in orders:
            rng = np.random.default_rng(cfg.training.seed)
            h = ImageCanonicalizer(ParameterStore(), rng, parse_group(f"c{n}"), 1, imgs.shape[-1], channels)
            med, iqr = time_call(lambda: h(imgs), repetitions)
            out.append(Timing("image.canonicalizer", n, batch, med, iqr, repetitions))
            if include_gcnn:
                g = GCNNBaseline(n, rng)
                med, iqr = time_call(lambda: g(imgs), repetitions)
                out.append(Timing("image.gcnn", n, batch, med, iqr, repetitions))
    return out


def benchmark_inference(cfg: ExperimentConfig, batch: int | None = None) -> list[Timing]:
    b = cfg.bench
    batch = batch or b.batch
    orders = [int(n) for n in b.orders.split(",")]
    reps = max(b.repetitions, 20)
    shapes_cfg = _shapes_config(cfg)
    return bench_shapes(shapes_cfg, batch, reps) + bench_orders(cfg, orders, batch, reps)


def _shapes_config(cfg: ExperimentConfig) -> ExperimentConfig:
    from copy import deepcopy

    c = deepcopy(cfg)
    c.task.name = "shapes"
    c.ablation_mode = "learned"
    c.model.canonicalizer = "learned"
    c.model.predictor = "deepsets"
    return c


def write_bench_csv(rows: list[Timing], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(BENCH_COLUMNS)
        for r in rows:
            w.writerow([r.component, r.group_order, r.batch, f"{r.median_ms:.6f}", f"{r.iqr_ms:.6f}", r.repetitions])


def overhead_ratio(rows: list[Timing]) -> float:
    """Pipeline median over predictor-alone median on the shapes task, minus one."""
    d = {r.component: r.median_ms for r in rows if r.component.startswith("shapes.")}
    return d["shapes.pipeline"] / d["shapes.predictor"] - 1.0


def growth(rows: list[Timing], component: str) -> float:
    """Latency at the largest group order over the smallest."""
    sel = sorted((r.group_order, r.median_ms) for r in rows if r.component == component)
    return sel[-1][1] / sel[0][1]
