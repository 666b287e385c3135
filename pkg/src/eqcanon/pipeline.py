"""Canonicalized models ``phi(x) = h'(x) f(h(x)^-1 x)`` and equivariance audits."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .canonicalization import (EmptyCloud, ImageCanonicalizer, PCACanonicalizer,
                               PCAImageCanonicalizer, PointCloudCanonicalizer)
from .groups import (Euclidean, GroupSpec, PlanarDiscrete, act_image, compose, elements,
                     inverse, random_element, stabilizer_elements, to_euclidean)
from .tensor import ParameterStore, Tensor

OUTPUT_REPS = ("invariant", "positions")


class CanonicalizedModel:
    """Canonicalizer ``h`` + unconstrained predictor ``f`` + output action.

    ``task`` selects the input layout:

    * ``"nbody"``: inputs ``(X, V, q)``; the predictor returns positions.
    * ``"shapes"``: inputs are clouds (B, N, d); invariant logits.
    * ``"image"``: inputs are images (B, C, H, W); invariant logits.

    ``canonicalizer=None`` gives the bare predictor (no equivariance).
    """

    def __init__(self, task: str, predictor, canonicalizer=None, output_rep: str = "invariant",
                 params: ParameterStore | None = None, partial: bool = False):
        if output_rep not in OUTPUT_REPS:
            raise ValueError(f"unknown output representation {output_rep!r}")
        if task not in ("nbody", "shapes", "image"):
            raise ValueError(f"unknown task {task!r}")
        self.task = task
        self.f = predictor
        self.h = canonicalizer
        self.output_rep = output_rep
        self.params = params if params is not None else ParameterStore()
        self.partial = partial
        self.last_info: dict = {}

    # -- forward ------------------------------------------------------------
    def __call__(self, inputs) -> Tensor:
        if self.partial:
            return partial_canonicalized_forward(self, inputs)
        return canonicalized_forward(self, inputs)

    def predict(self, inputs) -> np.ndarray:
        with T.no_grad():
            return self(inputs).data

    def canonical_parameters(self) -> list[str]:
        return [k for k in self.params.names() if k.startswith("canon.")]

    def predictor_parameters(self) -> list[str]:
        return [k for k in self.params.names() if not k.startswith("canon.")]


def canonicalized_forward(m: CanonicalizedModel, inputs) -> Tensor:
    m.last_info = {}
    if m.task == "image":
        images = T.as_tensor(inputs)
        if m.h is None:
            return m.f(images)
        res = m.h(images)
        m.last_info = {"unique": res.unique, "elements": res.elements, "logits": res.logits.data}
        return m.f(res.canonical)

    if m.task == "nbody":
        X, V, q = inputs
        X, V = T.as_tensor(X), T.as_tensor(V)
    else:
        X, V, q = T.as_tensor(inputs), None, None
    if X.shape[-2] == 0:
        raise EmptyCloud("point cloud has no points")
    if m.h is None:
        return m.f(X, V, q) if m.task == "nbody" else m.f(X)

    O, t = m.h(X, V)
    B, N, d = X.shape
    tb = T.broadcast_to(T.reshape(t, (B, 1, d)), X.shape)
    Xc = T.matmul(X - tb, O)  # rows: O^T (x - t)
    if m.task == "nbody":
        Vc = T.matmul(V, O)
        raw = m.f(Xc, Vc, q)
    else:
        raw = m.f(Xc)
    m.last_info = {"degenerate": getattr(m.h, "last_degenerate", np.zeros(B, bool))}
    if m.output_rep == "invariant":
        return raw
    return T.matmul(raw, T.swapaxes(O, -1, -2)) + tb


def partial_canonicalized_forward(m: CanonicalizedModel, inputs) -> Tensor:
    """Forward for a rotation-only canonicalizer in front of a translation-equivariant predictor.

    The canonicalizer must be translation invariant (local lifting + spatial
    averaging) and the predictor translation equivariant with global pooling.
    """
    if m.task != "image" or not isinstance(m.h, ImageCanonicalizer) or m.h.mode != "local":
        raise ValueError("partial canonicalization needs an image model with a local-mode canonicalizer")
    if getattr(m.f, "pool", None) != "global" or getattr(m.f, "padding_mode", None) != "circular":
        raise ValueError("partial canonicalization needs a circular, globally pooled CNN predictor")
    if any(spec.stride != 1 for _, _, spec in m.f.convs):
        raise ValueError("partial canonicalization needs stride-1 convolutions")
    return canonicalized_forward(m, inputs)


# ---------------------------------------------------------------------------
# group actions on batched task inputs
# ---------------------------------------------------------------------------

def transform_inputs(task: str, g_list: list, inputs):
    """Apply one group element per sample."""
    if task == "image":
        imgs = np.asarray(inputs)
        return np.stack([act_image(g, img) for g, img in zip(g_list, imgs)])
    if task == "nbody":
        X, V, q = inputs
        Xs, Vs = [], []
        for g, x, v in zip(g_list, X, V):
            e = to_euclidean(g, x.shape[-1])
            Xs.append(x @ e.O.T + e.t)
            Vs.append(v @ e.O.T)
        return np.stack(Xs), np.stack(Vs), q
    X = np.asarray(inputs)
    out = []
    for g, x in zip(g_list, X):
        e = to_euclidean(g, x.shape[-1])
        out.append(x @ e.O.T + e.t)
    return np.stack(out)


def transform_outputs(m: CanonicalizedModel, g_list: list, y: np.ndarray) -> np.ndarray:
    if m.output_rep == "invariant":
        return y
    out = []
    for g, yy in zip(g_list, y):
        e = to_euclidean(g, yy.shape[-1])
        out.append(yy @ e.O.T + e.t)
    return np.stack(out)


def _describe(spec: GroupSpec, g) -> str:
    if isinstance(g, PlanarDiscrete):
        return f"{spec}:k={g.k},r={g.r}"
    if isinstance(g, Euclidean):
        det = np.linalg.det(g.O)
        return f"{spec}:det={'+' if det > 0 else '-'}1,|t|={np.linalg.norm(g.t):.6f}"
    return f"{spec}:{'-'.join(map(str, g.sigma))}"


# ---------------------------------------------------------------------------
# audit
# ---------------------------------------------------------------------------

@dataclass
class AuditRow:
    sample_id: int
    transform_id: int
    group_desc: str
    abs_dev: float
    rel_dev: float
    symmetric_flag: int


@dataclass
class EquivarianceReport:
    group: GroupSpec
    n_samples: int
    n_transforms: int
    max_abs_dev: float
    max_rel_dev: float
    worst_case_ids: list
    symmetric_inputs_flagged: list
    approximate: bool = False
    unaudited_symmetric: str = ""
    rows: list = field(default_factory=list)

    def passed(self, tol: float) -> bool:
        return self.max_rel_dev < tol

    def summary(self) -> str:
        tag = " (approximate: interpolated rotations)" if self.approximate else ""
        return (f"group={self.group} samples={self.n_samples} transforms={self.n_transforms} "
                f"max_abs_dev={self.max_abs_dev:.3e} max_rel_dev={self.max_rel_dev:.3e} "
                f"flagged={len(self.symmetric_inputs_flagged)}{tag}")


def write_audit_csv(report: EquivarianceReport, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample_id", "transform_id", "group_desc", "abs_dev", "rel_dev", "symmetric_flag"])
        for r in report.rows:
            w.writerow([r.sample_id, r.transform_id, r.group_desc, repr(float(r.abs_dev)),
                        repr(float(r.rel_dev)), r.symmetric_flag])


def _take(task: str, inputs, idx):
    if task == "nbody":
        return tuple(np.asarray(a)[idx] for a in inputs)
    return np.asarray(inputs)[idx]


def _sample(task: str, inputs, i: int):
    if task == "nbody":
        return inputs[0][i]
    return np.asarray(inputs)[i]


def audit_equivariance(m: CanonicalizedModel, spec: GroupSpec, dataset, n_transforms: int,
                       tol: float, rng: np.random.Generator, exhaustive: bool = False,
                       batch_size: int = 256, stab_tol: float = 1e-9) -> EquivarianceReport:
    """Compare ``phi(g x)`` with ``rho'(g) phi(x)`` on random (or all) group elements.

    Samples with a nontrivial stabilizer (discrete groups) or a tied image fiber
    are flagged and judged by the relaxed criterion: the smallest deviation over
    ``g2`` in the coset ``g G_x``.
    """
    n = len(dataset[0]) if m.task == "nbody" else len(dataset)
    els = elements(spec) if (exhaustive and spec.discrete) else None
    n_tr = len(els) if els is not None else n_transforms
    rows: list[AuditRow] = []
    flagged: set[int] = set()
    approximate = spec.kind in ("Cn", "Dn") and m.task == "image" and 4 % spec.n != 0
    for start in range(0, n, batch_size):
        idx = np.arange(start, min(start + batch_size, n))
        xb = _take(m.task, dataset, idx)
        y0 = m.predict(xb)
        uniq0 = m.last_info.get("unique")
        stabs = {}
        for j, i in enumerate(idx):
            sym = False
            if spec.discrete:
                st = stabilizer_elements(spec, _sample(m.task, dataset, i), stab_tol)
                stabs[j] = st
                sym = len(st) > 1
            if uniq0 is not None and not uniq0[j]:
                sym = True
            if sym:
                flagged.add(int(i))
        for tr in range(n_tr):
            if els is not None:
                gs = [els[tr]] * len(idx)
            else:
                gs = [random_element(spec, rng) for _ in idx]
            xg = transform_inputs(m.task, gs, xb)
            yg = m.predict(xg)
            uniq = m.last_info.get("unique")
            expect = transform_outputs(m, gs, y0)
            for j, i in enumerate(idx):
                sym = int(i) in flagged or (uniq is not None and not uniq[j])
                if sym:
                    flagged.add(int(i))
                dev = _dev(yg[j], expect[j])
                if sym and spec.discrete and m.output_rep != "invariant" and len(stabs.get(j, [])) > 1:
                    for s in stabs[j]:
                        g2 = compose(gs[j], s)
                        alt = transform_outputs(m, [g2], y0[j:j + 1])[0]
                        dev = min(dev, _dev(yg[j], alt))
                scale = float(np.max(np.abs(expect[j]))) if expect[j].size else 0.0
                rel = dev / max(scale, 1e-12)
                rows.append(AuditRow(int(i), tr, _describe(spec, gs[j]), dev, rel, int(sym)))
    abs_devs = np.array([r.abs_dev for r in rows]) if rows else np.zeros(1)
    rel_devs = np.array([r.rel_dev for r in rows]) if rows else np.zeros(1)
    order = np.argsort(-rel_devs, kind="stable")[:5]
    worst = [rows[k].sample_id for k in order] if rows else []
    unaudited = "" if spec.discrete else "continuous group: symmetric inputs not enumerated"
    return EquivarianceReport(spec, n, n_tr, float(abs_devs.max()), float(rel_devs.max()), worst,
                              sorted(flagged), approximate, unaudited, rows)


def _dev(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.max(np.abs(np.asarray(a) - np.asarray(b)))) if np.size(a) else 0.0
