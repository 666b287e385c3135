"""Canonicalization functions: map an input to the group element that undoes its pose.

Two families live here. Direct canonicalizers read the element off an
equivariant network (Vector Neurons + Gram-Schmidt for point clouds, a shallow
G-CNN fiber + straight-through argmax for images). Energy canonicalizers
minimise ``s(g, x) = E(g^-1 x)`` over the group, either exhaustively on a grid
or by a few unrolled gradient steps on a rotation angle.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .groups import (Euclidean, GroupError, GroupSpec, PlanarDiscrete, act, compose,
                     elements, inverse, rotate_image_angle, stabilizer_elements)
from .layers import (VNDeepSets, group_conv_1x1, init_uniform, lifting_conv,
                     apply_selected, lifting_conv_local, rotated_stack,
                     stacked_inverse_operator)
from .tensor import ParameterStore, Tensor

GS_REL_EPS = 1e-6
TIE_TOL = 1e-9


class DegenerateFrame(ValueError):
    def __init__(self, message: str, index: int, sample: int | None = None):
        super().__init__(message)
        self.index = index
        self.sample = sample


class EmptyCloud(ValueError):
    pass


# ---------------------------------------------------------------------------
# Gram-Schmidt
# ---------------------------------------------------------------------------

def gram_schmidt(vectors) -> np.ndarray:
    """Orthonormalise the rows ``v_1..v_d`` of ``vectors``; returns ``e_i`` as columns."""
    V = np.asarray(vectors, dtype=np.float64)
    d = V.shape[0]
    scale = np.max(np.linalg.norm(V, axis=1))
    eps = GS_REL_EPS * scale
    us = []
    for i in range(d):
        u = V[i].copy()
        for uj in us:
            u = u - (uj @ V[i]) / (uj @ uj) * uj
        if not np.linalg.norm(u) > eps:
            raise DegenerateFrame(f"vector {i} is (nearly) dependent on the previous ones", i)
        us.append(u)
    return np.stack([u / np.linalg.norm(u) for u in us], axis=1)


def gram_schmidt_tensor(vectors, fallback_identity: bool = False):
    """Batched, differentiable Gram-Schmidt on (B, d, d) row vectors.

    Returns ``(Q, degenerate_mask)`` with ``Q`` (B, d, d) holding the frame in
    its columns. With ``fallback_identity`` degenerate samples get the identity
    frame instead of raising.
    """
    V = T.as_tensor(vectors)
    B, d, _ = V.shape
    scale = np.max(np.linalg.norm(V.data, axis=-1), axis=-1)
    eps = GS_REL_EPS * scale
    bad = np.zeros(B, bool)
    rows = [V[:, i, :] for i in range(d)]
    us: list[Tensor] = []
    for i in range(d):
        u = rows[i]
        for uj in us:
            coef = T.dot(uj, rows[i]) / T.dot(uj, uj)
            u = u - T.expand_to(coef, u.shape) * uj
        un = np.linalg.norm(u.data, axis=-1)
        weak = ~(un > eps)
        if weak.any() and not fallback_identity:
            b = int(np.flatnonzero(weak)[0])
            raise DegenerateFrame(f"sample {b}: vector {i} is (nearly) dependent on the previous ones", i, b)
        if weak.any():
            bad |= weak
            # keep the division well defined; these samples are replaced below
            patch = np.zeros((B, d))
            patch[weak, i] = 1.0
            u = T.mul(u, Tensor(np.where(weak, 0.0, 1.0)[:, None] * np.ones((B, d)))) + Tensor(patch)
        us.append(u)
    es = [u / T.expand_to(T.norm(u), u.shape) for u in us]
    Q = T.stack(es, axis=-1)
    if bad.any():
        keep = Tensor(np.where(bad, 0.0, 1.0)[:, None, None] * np.ones((B, d, d)))
        eye = Tensor(np.where(bad, 1.0, 0.0)[:, None, None] * np.eye(d)[None])
        Q = Q * keep + eye
    return Q, bad


# ---------------------------------------------------------------------------
# point clouds
# ---------------------------------------------------------------------------

class PointCloudCanonicalizer:
    """Frame from VN Deep Sets + Gram-Schmidt; translation from the centroid.

    ``translation_mode="learned"`` adds one more equivariant VN output vector to
    the centroid.
    """

    def __init__(self, params: ParameterStore, rng: np.random.Generator, d: int = 3,
                 hidden: int = 8, n_layers: int = 2, with_velocity: bool = False,
                 translation_mode: str = "centroid", fallback_identity: bool = False,
                 prefix: str = "canon."):
        if translation_mode not in ("centroid", "learned"):
            raise ValueError(f"unknown translation mode {translation_mode!r}")
        self.d = d
        self.translation_mode = translation_mode
        self.fallback_identity = fallback_identity
        self.with_velocity = with_velocity
        n_out = d + (1 if translation_mode == "learned" else 0)
        if n_layers == 0 and not with_velocity and d > 2:
            # pooled [x - c, |x - c| (x - c)] spans one direction: never a full frame
            raise ValueError("a linear VN canonicalizer needs velocity inputs to span a frame")
        in_ch = 6 if with_velocity else 2
        self.net = VNDeepSets(params, prefix + "vn.", in_ch, hidden, n_layers, n_out, rng)
        self.last_degenerate = np.zeros(0, bool)

    def __call__(self, X, V=None):
        """Return ``(O, t)`` as Tensors of shape (B, d, d) and (B, d)."""
        X = T.as_tensor(X)
        if X.ndim == 2:
            raise ValueError("expected a batch (B, N, d)")
        B, N, d = X.shape
        if N == 0:
            raise EmptyCloud("point cloud has no points")
        c = T.mean(X, axis=1)
        Xc = X - T.broadcast_to(T.reshape(c, (B, 1, d)), X.shape)
        vecs = self.net(Xc, V if self.with_velocity else None)  # (B, n_out, d)
        O, bad = gram_schmidt_tensor(vecs[:, :d, :], self.fallback_identity)
        self.last_degenerate = bad
        t = c
        if self.translation_mode == "learned":
            t = c + vecs[:, d, :]
        return O, t

    def element(self, X, V=None) -> Euclidean:
        """Canonicalize one cloud (N, d)."""
        with T.no_grad():
            O, t = self(np.asarray(X)[None], None if V is None else np.asarray(V)[None])
        return Euclidean(O.data[0], t.data[0])


def canonicalize_pointcloud(c: PointCloudCanonicalizer, X, V=None) -> Euclidean:
    X = np.asarray(X, dtype=np.float64)
    if X.shape[0] == 0:
        raise EmptyCloud("point cloud has no points")
    return c.element(X, V)


def pca_frame(X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Principal axes of a cloud (N, d), eigenvalue-descending.

    Each axis is signed to have a nonnegative dot product with the first
    centered point. Returns ``(O, centroid)``.
    """
    X = np.asarray(X, dtype=np.float64)
    c = X.mean(axis=0)
    Xc = X - c
    cov = Xc.T @ Xc / len(X)
    w, E = np.linalg.eigh(cov)
    E = E[:, np.argsort(w)[::-1]]
    signs = np.where(Xc[0] @ E >= 0, 1.0, -1.0)
    return E * signs, c


class PCACanonicalizer:
    """Fixed (not learned) point-cloud canonicalizer from principal axes."""

    def __call__(self, X, V=None):
        X = T.as_tensor(X)
        Os, ts = [], []
        for cloud in X.data:
            O, c = pca_frame(cloud)
            Os.append(O)
            ts.append(c)
        return Tensor(np.stack(Os)), Tensor(np.stack(ts))

    def element(self, X, V=None) -> Euclidean:
        O, c = pca_frame(X)
        return Euclidean(O, c)


# ---------------------------------------------------------------------------
# straight-through selection
# ---------------------------------------------------------------------------

def tolerant_argmax(logits: np.ndarray, tie_tol: float = 0.0) -> np.ndarray:
    """Lowest index whose value is within ``tie_tol * (max|logit| + 1)`` of the maximum."""
    z = np.asarray(logits)
    top = z.max(axis=-1, keepdims=True)
    slack = tie_tol * (np.abs(z).max(axis=-1, keepdims=True) + 1.0)
    return np.argmax(z >= top - slack, axis=-1)


def straight_through_select(logits, tie_tol: float = 0.0):
    """Hard argmax forward (ties -> lowest index), softmax-Jacobian backward.

    Entries within ``tie_tol`` (relative, see ``tolerant_argmax``) of the
    maximum count as tied. Returns ``(index, one_hot)``; ``index`` is an int
    array over the batch.
    """
    logits = T.as_tensor(logits)
    idx = tolerant_argmax(logits.data, tie_tol)
    hard = np.zeros(logits.shape)
    np.put_along_axis(hard, idx[..., None], 1.0, axis=-1)
    soft = T.softmax(logits)
    return idx, Tensor(hard) + (soft - soft.detach())


def argmax_margin(logits: np.ndarray) -> np.ndarray:
    """Gap between the largest and second largest entry along the last axis."""
    s = np.sort(logits, axis=-1)
    if s.shape[-1] < 2:
        return np.full(s.shape[:-1], np.inf)
    return s[..., -1] - s[..., -2]


# ---------------------------------------------------------------------------
# images
# ---------------------------------------------------------------------------

@dataclass
class ImageCanonicalization:
    elements: list
    canonical: Tensor
    logits: Tensor
    unique: np.ndarray


class ImageCanonicalizer:
    """Shallow G-CNN on Cn/Dn whose fiber argmax gives the input orientation.

    ``mode="global"``: full-image lifting filters (1x1 spatial output).
    ``mode="local"``: small circular lifting filters, ReLU and spatial averaging,
    which makes the fiber invariant to circular translations.
    """

    def __init__(self, params: ParameterStore, rng: np.random.Generator, spec: GroupSpec,
                 in_channels: int = 1, size: int = 28, channels: tuple = (8, 8, 1),
                 mode: str = "global", kernel: int = 5, selection: str = "straight_through",
                 prefix: str = "canon."):
        if spec.kind not in ("Cn", "Dn"):
            raise GroupError(f"image canonicalizer needs Cn or Dn, got {spec}")
        if mode not in ("global", "local"):
            raise ValueError(f"unknown lifting mode {mode!r}")
        self.spec = spec
        self.mode = mode
        self.size = size
        self.selection = selection
        self.elements = elements(spec)
        self._bank = None
        G = len(self.elements)
        c0 = channels[0]
        if mode == "global":
            fan = in_channels * size * size
            self.filters = params.add(prefix + "lift.W", init_uniform(rng, (c0, in_channels, size, size), fan))
        else:
            fan = in_channels * kernel * kernel
            self.filters = params.add(prefix + "lift.W", init_uniform(rng, (c0, in_channels, kernel, kernel), fan))
        self.lift_bias = params.add(prefix + "lift.b", init_uniform(rng, (c0,), fan))
        self.gconvs = []
        for i, (a, b) in enumerate(zip(channels[:-1], channels[1:])):
            W = params.add(f"{prefix}g{i}.W", init_uniform(rng, (b, a, G), a * G))
            bb = params.add(f"{prefix}g{i}.b", init_uniform(rng, (b,), a * G))
            self.gconvs.append((W, bb))

    def fiber_logits(self, stack) -> Tensor:
        if self.mode == "global":
            F = T.relu(lifting_conv(self.filters, stack, self.lift_bias))
        else:
            F = lifting_conv_local(self.filters, stack, self.lift_bias)
        for i, (W, b) in enumerate(self.gconvs):
            F = group_conv_1x1(W, F, self.spec, b)
            if i < len(self.gconvs) - 1:
                F = T.relu(F)
        return T.mean(F, axis=-1)  # (B, |G|)

    def _filter_bank(self) -> np.ndarray:
        """Lifting filters pulled back through every rotation, shape (C*HW, |G|*O).

        ``<f, R_m I> = <R_m^T f, I>``, so at inference a single dense matmul
        replaces building the rotated stack.
        """
        W = self.filters.data
        if self._bank is not None and np.array_equal(self._bank[0], W):
            return self._bank[1]
        O, C, H, _ = W.shape
        HW = H * H
        op = stacked_inverse_operator(self.spec, H)
        G = op.shape[0] // HW
        flat = W.reshape(O * C, HW)
        bank = np.empty((C, HW, G, O))
        for m in range(G):
            pulled = np.asarray(op[m * HW:(m + 1) * HW].T @ flat.T)  # (HW, O*C)
            bank[:, :, m, :] = pulled.reshape(HW, O, C).transpose(2, 0, 1)
        bank = bank.reshape(C * HW, G * O)
        self._bank = (W.copy(), bank)
        return bank

    def _fast_inference(self, images: Tensor) -> ImageCanonicalization:
        B, C, H, _ = images.shape
        G = len(self.elements)
        O = self.filters.shape[0]
        F = images.data.reshape(B, C * H * H) @ self._filter_bank()
        F = np.maximum(F.reshape(B, G, O) + self.lift_bias.data, 0.0)
        for i, (W, b) in enumerate(self.gconvs):
            F = _group_conv_inference(W.data, F, self.spec, b.data)
            if i < len(self.gconvs) - 1:
                F = np.maximum(F, 0.0)
        logits = Tensor(F.mean(axis=-1))
        idx = tolerant_argmax(logits.data, TIE_TOL)
        canon = apply_selected(images.data, self.spec, idx)
        margin = argmax_margin(logits.data)
        unique = margin > TIE_TOL * (np.max(np.abs(logits.data), axis=-1) + 1.0)
        return ImageCanonicalization([self.elements[i] for i in idx], Tensor(canon),
                                     logits, unique)

    def __call__(self, images) -> ImageCanonicalization:
        images = T.as_tensor(images)
        if (not T.grad_enabled() and self.mode == "global" and self.selection == "straight_through"
                and images.shape[-1] == self.size):
            return self._fast_inference(images)
        B = images.shape[0]
        stack = rotated_stack(images, self.spec)
        logits = self.fiber_logits(stack)
        G = stack.shape[1]
        if self.selection == "soft":
            idx = tolerant_argmax(logits.data, TIE_TOL)
            weights = T.softmax(logits)
        else:
            idx, weights = straight_through_select(logits, TIE_TOL)
        flat = T.reshape(stack, (B, G, -1))
        w = T.broadcast_to(T.reshape(weights, (B, G, 1)), flat.shape)
        canon = T.tsum(w * flat, axis=1)
        canon = T.reshape(canon, images.shape)
        margin = argmax_margin(logits.data)
        scale = np.max(np.abs(logits.data), axis=-1) + 1.0
        unique = margin > TIE_TOL * scale
        return ImageCanonicalization([self.elements[i] for i in idx], canon, logits, unique)


def _group_conv_inference(W: np.ndarray, F: np.ndarray, spec: GroupSpec, b: np.ndarray) -> np.ndarray:
    """numpy group correlation; cyclic groups go through the FFT along the fiber."""
    if spec.kind != "Cn" or spec.n < 8:
        return group_conv_1x1(Tensor(W), Tensor(F), spec, Tensor(b)).data
    # F'[m, o] = sum_{j, c} W[o, c, j] F[m + j, c]  (indices mod n)
    Fh = np.fft.rfft(F, axis=1)  # (B, K, C)
    Wh = np.conj(np.fft.rfft(W, axis=2))  # (O, C, K)
    out = np.einsum("bkc,ock->bko", Fh, Wh)
    return np.fft.irfft(out, n=spec.n, axis=1) + b


def canonicalize_image(c: ImageCanonicalizer, image):
    """Canonicalize one image (C, H, W); returns ``(g, canonical image)``."""
    img = np.asarray(image, dtype=np.float64)
    if img.shape[-1] != img.shape[-2]:
        raise GroupError(f"image must be square, got {img.shape[-2:]}")
    with T.no_grad():
        res = c(img[None])
    return res.elements[0], res.canonical.data[0]


def pca_image_angle(image: np.ndarray) -> float:
    """Principal-axis angle of the intensity mass (radians, counterclockwise).

    The axis direction is chosen so the third moment along it is nonnegative.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 3:
        img = img.sum(axis=0)
    H = img.shape[-1]
    c = (H - 1) / 2.0
    rows, cols = np.meshgrid(np.arange(H), np.arange(H), indexing="ij")
    x = cols - c
    y = c - rows
    m = img.sum()
    if m <= 0:
        return 0.0
    mx, my = (img * x).sum() / m, (img * y).sum() / m
    dx, dy = x - mx, y - my
    mu20 = (img * dx * dx).sum()
    mu02 = (img * dy * dy).sum()
    mu11 = (img * dx * dy).sum()
    theta = 0.5 * np.arctan2(2 * mu11, mu20 - mu02)
    proj = dx * np.cos(theta) + dy * np.sin(theta)
    if (img * proj ** 3).sum() < 0:
        theta += np.pi
    return float(theta)


class PCAImageCanonicalizer:
    """Rotate each image so its principal intensity axis points along +x."""

    def __call__(self, images) -> ImageCanonicalization:
        images = T.as_tensor(images)
        out = np.stack([rotate_image_angle(img, -pca_image_angle(img)) for img in images.data])
        B = images.shape[0]
        return ImageCanonicalization([None] * B, Tensor(out), Tensor(np.zeros((B, 1))), np.ones(B, bool))


# ---------------------------------------------------------------------------
# optimization approach
# ---------------------------------------------------------------------------

def energy_s(E: Callable, g, x) -> float:
    """``s(g, x) = E(g^-1 x)`` for a single sample."""
    return float(np.asarray(E(act(inverse(g), x))))


def rotation_matrices(theta: Tensor) -> Tensor:
    """(B,) angles -> (B, 2, 2) counterclockwise rotation matrices."""
    c, s = T.cos(theta), T.sin(theta)
    row0 = T.stack([c, -s], axis=-1)
    row1 = T.stack([s, c], axis=-1)
    return T.stack([row0, row1], axis=-2)


class EnergyCanonicalizer:
    """``h(x) = argmin_g E(g^-1 x)``.

    ``search="grid"`` enumerates a discrete group (ties -> lowest index).
    ``search="gradient"`` runs ``steps`` unrolled gradient-descent updates on a
    planar rotation angle from ``n_init`` evenly spaced starts and keeps the
    start with the lowest final energy. The inner derivative is a central
    difference in the angle built from recorded ops, so training gradients flow
    through every step without second-order autodiff.

    ``energy`` maps a batch of samples (Tensor) to per-sample energies (B,).
    Gradient mode expects 2-D point clouds (B, N, 2) plus optional per-point
    features that are carried along unrotated.
    """

    def __init__(self, energy: Callable, search: str = "grid", spec: GroupSpec | None = None,
                 steps: int = 5, lr: float = 0.1, n_init: int = 4, fd_step: float = 1e-4):
        if search not in ("grid", "gradient"):
            raise ValueError(f"unknown search {search!r}")
        if search == "grid" and (spec is None or not spec.discrete):
            raise GroupError("grid search needs a discrete group")
        self.energy = energy
        self.search = search
        self.spec = spec
        self.steps = steps
        self.lr = lr
        self.n_init = n_init
        self.fd_step = fd_step
        self.trace: list[np.ndarray] = []

    def grid(self, xs: list) -> tuple[list, np.ndarray]:
        """Exhaustive argmin for a list of samples. Returns (elements, energies)."""
        els = elements(self.spec)
        out, table = [], []
        for x in xs:
            cands = [act(inverse(g), x) for g in els]
            with T.no_grad():
                e = np.asarray(self.energy(Tensor(np.stack(cands))).data, dtype=np.float64)
            table.append(e)
            out.append(els[int(np.argmin(e))])
        return out, np.array(table)

    def _energy_at(self, X: Tensor, feats, theta: Tensor) -> Tensor:
        R = rotation_matrices(theta)
        Xr = T.matmul(X, R)  # rows x^T R = (R^T x)^T
        if feats is not None:
            Xr = T.concat([Xr, T.as_tensor(feats)], axis=-1)
        return self.energy(Xr)

    def angles(self, X, feats=None) -> Tensor:
        """Differentiable canonical angles (B,) for 2-D clouds (B, N, 2)."""
        X = T.as_tensor(X)
        B = X.shape[0]
        h = self.fd_step
        finals, energies = [], []
        self.trace = []
        for i in range(self.n_init):
            theta = Tensor(np.full(B, 2 * np.pi * i / self.n_init))
            path = [theta.data.copy()]
            for _ in range(self.steps):
                ep = self._energy_at(X, feats, theta + h)
                em = self._energy_at(X, feats, theta - h)
                grad = T.scale(ep - em, 1.0 / (2 * h))
                theta = theta - T.scale(grad, self.lr)
                path.append(theta.data.copy())
            self.trace.append(np.stack(path))
            finals.append(theta)
            energies.append(self._energy_at(X, feats, theta).data)
        best = np.argmin(np.stack(energies), axis=0)  # lowest start index on ties
        pick = np.zeros((self.n_init, B))
        pick[best, np.arange(B)] = 1.0
        theta = finals[0] * Tensor(pick[0])
        for i in range(1, self.n_init):
            theta = theta + finals[i] * Tensor(pick[i])
        return theta


def canonicalize_optim(c: EnergyCanonicalizer, x):
    """Canonical group element for one sample."""
    if c.search == "grid":
        return c.grid([x])[0][0]
    X = np.asarray(x, dtype=np.float64)
    theta = float(c.angles(X[None]).data[0])
    R = np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
    return Euclidean(R, np.zeros(2))


# ---------------------------------------------------------------------------
# Theorem-B.1-style checks on energies
# ---------------------------------------------------------------------------

@dataclass
class B1Report:
    n_triples: int
    condition1_violations: int
    condition2_failures: list
    n_samples: int

    @property
    def condition1_holds(self) -> bool:
        return self.condition1_violations == 0

    @property
    def condition2_holds(self) -> bool:
        return not self.condition2_failures


def check_theorem_b1(E: Callable, spec: GroupSpec, samples, tol: float = 0.0,
                     stab_tol: float = 1e-9) -> B1Report:
    """Check the two sufficient conditions for relaxed equivariance of an energy argmin.

    Condition 1 compares ``s(g, g1 x)`` with ``s(g1^-1 g, x)`` for every pair.
    Condition 2 requires the argmin set of each sample to sit inside one right
    coset ``G_x g1`` of its stabilizer.
    """
    if not spec.discrete:
        raise GroupError("condition checks need a discrete group")
    samples = list(samples)
    els = elements(spec)
    viol = 0
    triples = 0
    failures = []
    for sid, x in enumerate(samples):
        s_x = {g: energy_s(E, g, x) for g in els}
        for g1 in els:
            y = act(g1, x)
            g1i = inverse(g1)
            for g in els:
                triples += 1
                lhs = energy_s(E, g, y)
                rhs = s_x[compose(g1i, g)] if isinstance(g, PlanarDiscrete) else energy_s(E, compose(g1i, g), x)
                if abs(lhs - rhs) > tol:
                    viol += 1
        vals = np.array([s_x[g] for g in els])
        lo = vals.min()
        argmin = [g for g, v in zip(els, vals) if v <= lo + stab_tol * max(1.0, abs(lo))]
        stab = stabilizer_elements(spec, x, stab_tol)
        a0i = inverse(argmin[0])
        if not all(any(_same(compose(a, a0i), s) for s in stab) for a in argmin):
            failures.append(sid)
    return B1Report(triples, viol, failures, len(list(samples)) if not isinstance(samples, list) else len(samples))


def _same(a, b) -> bool:
    if isinstance(a, Euclidean):
        return a.allclose(b)
    return a == b
