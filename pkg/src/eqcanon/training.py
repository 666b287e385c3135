"""Model construction, training loop, evaluation and metric files."""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .canonicalization import (DegenerateFrame, ImageCanonicalizer, PCACanonicalizer,
                               PCAImageCanonicalizer, PointCloudCanonicalizer)
from .config import ExperimentConfig
from .groups import parse_group, random_element
from .layers import CNN, DESK_CNN_LAYOUT, GNN, MLP, PAPER_CNN_LAYOUT, ConvSpec, DeepSets
from .pipeline import CanonicalizedModel, audit_equivariance, transform_inputs, transform_outputs
from .tasks import ImageSet, NBodySet, ShapeSet, gen_glyphs, gen_nbody, gen_shapes, load_idx_images
from .tensor import ParameterStore, Tensor, load_tensors, save_tensors

log = logging.getLogger("eqcanon")

METRIC_COLUMNS = ["epoch", "split", "loss", "metric", "wall_ms", "equivariance_max_dev"]
SMALL_CNN_LAYOUT = [ConvSpec(8, 3), ConvSpec(8, 3)]
SPLIT_SEED_OFFSET = {"train": 0, "val": 1_000_000, "test": 2_000_000}


class TrainingAbort(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------

def split_size(cfg: ExperimentConfig, split: str) -> int:
    return {"train": cfg.task.n_train, "val": cfg.task.n_val, "test": cfg.task.n_test}[split]


def make_split(cfg: ExperimentConfig, split: str):
    """Generate (or load) one split. Splits use disjoint seed ranges."""
    t = cfg.task
    n = split_size(cfg, split)
    seed = t.seed + SPLIT_SEED_OFFSET[split]
    if t.name == "nbody":
        return gen_nbody(n, t.n_particles, t.dt, t.n_steps, t.softening, seed)
    if t.name == "glyphs":
        return gen_glyphs(n, t.n_classes, parse_group(t.group), seed, symmetric_class=t.symmetric_class)
    if t.name == "shapes":
        return gen_shapes(n, t.n_points, t.n_classes, seed)
    paths = {"train": (t.idx_train_images, t.idx_train_labels),
             "test": (t.idx_test_images, t.idx_test_labels)}.get(split)
    if not paths or not all(paths):
        raise FileNotFoundError(f"no IDX files configured for split {split!r}")
    for p in paths:
        if not Path(p).is_file():
            raise FileNotFoundError(f"dataset file missing: {p}")
    return load_idx_images(*paths)


def model_inputs(task: str, data):
    if isinstance(data, NBodySet):
        return data.inputs()
    if isinstance(data, ImageSet):
        return data.images
    return data.points


def targets(data):
    return data.XT if isinstance(data, NBodySet) else data.labels


def model_task(cfg: ExperimentConfig) -> str:
    return {"nbody": "nbody", "shapes": "shapes"}.get(cfg.task.name, "image")


# ---------------------------------------------------------------------------
# model construction
# ---------------------------------------------------------------------------

def _cnn_layout(name: str):
    return {"desk": DESK_CNN_LAYOUT, "paper": PAPER_CNN_LAYOUT, "small": SMALL_CNN_LAYOUT}[name]


def build_model(cfg: ExperimentConfig, seed: int | None = None) -> CanonicalizedModel:
    """Instantiate canonicalizer and predictor from the config.

    Canonicalizer parameters live under ``canon.``, predictor parameters under
    ``f.``; both are drawn from one generator seeded by ``training.seed``.
    """
    mc = cfg.model
    rng = np.random.default_rng(cfg.training.seed if seed is None else seed)
    params = ParameterStore()
    task = model_task(cfg)
    mode = cfg.ablation_mode if mc.canonicalizer == "learned" else "none"
    h = None
    partial = False
    if task == "image":
        size = 28
        if mode in ("learned", "frozen"):
            channels = tuple(int(c) for c in mc.canon_channels.split(","))
            h = ImageCanonicalizer(params, rng, parse_group(mc.canon_group), 1, size, channels, mc.canon_mode)
            partial = mc.canon_mode == "local"
        elif mode == "pca":
            h = PCAImageCanonicalizer()
        if partial:
            f = CNN(params, "f.", 1, size, SMALL_CNN_LAYOUT, mc.hidden, cfg.task.n_classes, rng,
                    pool="global", padding_mode="circular")
        else:
            f = CNN(params, "f.", 1, size, _cnn_layout(mc.cnn_layout), mc.hidden, cfg.task.n_classes, rng)
        return CanonicalizedModel("image", f, h, "invariant", params, partial)
    if task == "nbody":
        if mode in ("learned", "frozen"):
            h = PointCloudCanonicalizer(params, rng, 3, mc.canon_hidden, mc.canon_layers, with_velocity=True,
                                        translation_mode=mc.canon_translation,
                                        fallback_identity=mc.fallback_identity)
        elif mode == "pca":
            h = PCACanonicalizer()
        f = GNN(params, "f.", mc.hidden, mc.layers, rng)
        return CanonicalizedModel("nbody", f, h, "positions", params)
    if mode in ("learned", "frozen"):
        h = PointCloudCanonicalizer(params, rng, 3, mc.canon_hidden, mc.canon_layers,
                                    translation_mode=mc.canon_translation,
                                    fallback_identity=mc.fallback_identity)
    elif mode == "pca":
        h = PCACanonicalizer()
    if mc.predictor == "mlp":
        f = _FlattenMLP(params, "f.", cfg.task.n_points * 3, mc.hidden, cfg.task.n_classes, rng)
    else:
        f = DeepSets(params, "f.", 3, mc.hidden, cfg.task.n_classes, rng)
    return CanonicalizedModel("shapes", f, h, "invariant", params)


class _FlattenMLP:
    """Order-dependent point-cloud baseline."""

    def __init__(self, params, prefix, in_dim, hidden, out_dim, rng):
        self.mlp = MLP(params, prefix, [in_dim, hidden, hidden, out_dim], rng)

    def __call__(self, x):
        x = T.as_tensor(x)
        return self.mlp(T.reshape(x, (x.shape[0], -1)))


def trainable_names(m: CanonicalizedModel, ablation_mode: str) -> list[str]:
    if ablation_mode == "frozen":
        return m.predictor_parameters()
    return m.params.names()


# ---------------------------------------------------------------------------
# optimizer and losses
# ---------------------------------------------------------------------------

class Adam:
    """Adam with decoupled-from-nothing L2 weight decay added to the gradient."""

    def __init__(self, params: ParameterStore, names: list[str], lr: float = 1e-3,
                 betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.0):
        self.params = params
        self.names = list(names)
        self.lr, self.b1, self.b2, self.eps, self.wd = lr, betas[0], betas[1], eps, weight_decay
        self.t = 0
        self.m = {k: np.zeros(params[k].shape) for k in self.names}
        self.v = {k: np.zeros(params[k].shape) for k in self.names}

    def step(self) -> None:
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for k in self.names:
            p = self.params[k]
            g = p.grad if p.grad is not None else np.zeros(p.shape)
            if self.wd:
                g = g + self.wd * p.data
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            p.data = p.data - self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)

    def reset(self, names) -> None:
        for k in names:
            if k in self.m:
                self.m[k][...] = 0.0
                self.v[k][...] = 0.0


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    onehot = np.zeros(logits.shape)
    onehot[np.arange(len(labels)), labels] = 1.0
    return -T.tsum(T.log_softmax(logits) * Tensor(onehot)) * (1.0 / len(labels))


def mse(pred: Tensor, target: np.ndarray) -> Tensor:
    return T.mean(T.square(pred - Tensor(target)))


def loss_and_metric(task: str, out: Tensor, y: np.ndarray):
    """Returns (loss Tensor, metric): accuracy for classification, MSE for dynamics."""
    if task == "nbody":
        loss = mse(out, y)
        return loss, float(loss.data)
    loss = cross_entropy(out, y)
    return loss, float(np.mean(np.argmax(out.data, axis=-1) == y))


def _take(inputs, idx):
    if isinstance(inputs, tuple):
        return tuple(a[idx] for a in inputs)
    return inputs[idx]


def _len(inputs) -> int:
    return len(inputs[0]) if isinstance(inputs, tuple) else len(inputs)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    model: CanonicalizedModel
    rows: list
    initial_state: dict
    final_state: dict
    best_epoch: int


def _check_degenerate(m: CanonicalizedModel, rate_limit: float) -> None:
    bad = m.last_info.get("degenerate")
    if bad is not None and len(bad) and np.mean(bad) > rate_limit:
        raise TrainingAbort(f"degenerate frames in {int(np.sum(bad))}/{len(bad)} samples of a batch "
                            f"(limit {rate_limit:.0%}); symmetric data or a misconfigured canonicalizer")


def _equivariance_probe(cfg: ExperimentConfig, m: CanonicalizedModel, data, epoch: int) -> float:
    """Audit on a small fixed subset; cheap enough to run every epoch."""
    n = min(16, len(data))
    if n == 0:
        return 0.0
    sub = data.subset(np.arange(n))
    rep = audit_equivariance(m, parse_group(cfg.audit.group), model_inputs(m.task, sub), 2,
                             cfg.audit.tol, np.random.default_rng(cfg.audit.seed + epoch))
    return rep.max_rel_dev


def run_epoch_eval(m: CanonicalizedModel, inputs, y, batch_size: int = 256):
    total, metric, n = 0.0, 0.0, _len(inputs)
    for s in range(0, n, batch_size):
        idx = np.arange(s, min(s + batch_size, n))
        with T.no_grad():
            out = m(_take(inputs, idx))
        loss, met = loss_and_metric(m.task, out, y[idx])
        total += float(loss.data) * len(idx)
        metric += met * len(idx)
    return total / max(n, 1), metric / max(n, 1)


def _augment(cfg: ExperimentConfig, task: str, inputs, y, rng):
    spec = parse_group(cfg.eval.group)
    gs = [random_element(spec, rng) for _ in range(_len(inputs))]
    xg = transform_inputs(task, gs, inputs)
    if task == "nbody":
        yg = np.stack([transform_inputs("shapes", [g], yy[None])[0] for g, yy in zip(gs, y)])
        return xg, yg
    return xg, y


def train(cfg: ExperimentConfig, out_dir=None, data=None) -> TrainResult:
    """Minibatch Adam. Writes ``metrics.csv`` and ``model.canon1`` when ``out_dir`` is given."""
    tc = cfg.training
    m = build_model(cfg)
    initial = m.params.state()
    names = trainable_names(m, cfg.ablation_mode)
    opt = Adam(m.params, names, tc.learning_rate, weight_decay=tc.weight_decay)
    data = data or {}
    train_set = data.get("train") or make_split(cfg, "train")
    val_set = data.get("val") or (make_split(cfg, "val") if cfg.task.n_val else None)
    probe_set = val_set if val_set is not None else train_set
    X, y = model_inputs(m.task, train_set), targets(train_set)
    n = _len(X)
    rng = np.random.default_rng(tc.seed + 1)
    aug_rng = np.random.default_rng(tc.seed + 2)
    rows = []
    classification = m.task != "nbody"
    best, best_epoch, best_state, stale = -np.inf, 0, m.params.state(), 0
    for epoch in range(1, tc.epochs + 1):
        if tc.reinit_predictor_after and epoch == tc.reinit_predictor_after + 1:
            fresh = build_model(cfg, seed=tc.seed + 7919).params.state()
            for k in m.predictor_parameters():
                m.params[k].data = fresh[k].copy()
            opt.reset(m.predictor_parameters())
            log.info("epoch %d: predictor re-initialised", epoch)
        t0 = time.perf_counter()
        order = rng.permutation(n)
        tot_loss, tot_met = 0.0, 0.0
        for s in range(0, n, tc.batch_size):
            idx = order[s:s + tc.batch_size]
            xb, yb = _take(X, idx), y[idx]
            if tc.augment:
                xb, yb = _augment(cfg, m.task, xb, yb, aug_rng)
            m.params.zero_grad()
            out = m(xb)
            _check_degenerate(m, tc.degenerate_abort_rate)
            loss, met = loss_and_metric(m.task, out, yb)
            T.run_backward(loss)
            opt.step()
            tot_loss += float(loss.data) * len(idx)
            tot_met += met * len(idx)
        wall = (time.perf_counter() - t0) * 1e3 if tc.record_wall_ms else 0.0
        dev = _equivariance_probe(cfg, m, probe_set, epoch) if m.h is not None else float("nan")
        rows.append([epoch, "train", tot_loss / n, tot_met / n, wall, dev])
        log.info("epoch %d train loss %.6f metric %.4f", epoch, tot_loss / n, tot_met / n)
        if val_set is not None:
            vl, vm = run_epoch_eval(m, model_inputs(m.task, val_set), targets(val_set))
            rows.append([epoch, "val", vl, vm, 0.0, dev])
            score = vm if classification else -vl
            if score > best:
                best, best_epoch, best_state, stale = score, epoch, m.params.state(), 0
            else:
                stale += 1
                if classification and stale >= tc.early_stopping_patience:
                    log.info("early stopping at epoch %d (best %d)", epoch, best_epoch)
                    break
    if val_set is not None and best_epoch:
        m.params.load_state(best_state)
    else:
        best_epoch = tc.epochs
    result = TrainResult(m, rows, initial, m.params.state(), best_epoch)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_metrics(out / "metrics.csv", rows)
        save_tensors(out / "model.canon1", result.final_state)
    return result


def write_metrics(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        for r in rows:
            w.writerow([r[0], r[1]] + [repr(float(v)) for v in r[2:]])


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def load_checkpoint(cfg: ExperimentConfig, path) -> CanonicalizedModel:
    m = build_model(cfg)
    m.params.load_state(load_tensors(path))
    return m


def evaluate(cfg: ExperimentConfig, model, split: str | None = None, data=None) -> list:
    """One metrics row ``[epoch, split, loss, metric, wall_ms, max_dev]`` for a split.

    With ``eval.transform = rotated`` every sample is acted on by a random
    element of ``eval.group`` drawn from ``eval.seed``; targets transform along.
    """
    split = split or cfg.eval.split
    m = model if isinstance(model, CanonicalizedModel) else load_checkpoint(cfg, model)
    data = data if data is not None else make_split(cfg, split)
    X, y = model_inputs(m.task, data), targets(data)
    if cfg.eval.transform == "rotated":
        rng = np.random.default_rng(cfg.eval.seed)
        spec = parse_group(cfg.eval.group)
        gs = [random_element(spec, rng) for _ in range(_len(X))]
        X = transform_inputs(m.task, gs, X)
        if m.task == "nbody":
            y = np.stack([transform_inputs("shapes", [g], t[None])[0] for g, t in zip(gs, y)])
    loss, met = run_epoch_eval(m, X, y)
    return [0, split, loss, met, 0.0, float("nan")]


def transformed_outputs(m, gs, y):
    return transform_outputs(m, gs, y)
