"""Group elements, their composition, and their actions on point clouds and images.

Planar discrete elements are ``rot^k * flip^r``: an image is first flipped
horizontally (if ``r``) and then rotated counterclockwise by ``2*pi*k/n``.
Euclidean elements compose as ``(O1, t1)(O2, t2) = (O1 O2, O1 t2 + t1)`` so that
acting with a product equals acting with the factors in turn.
"""
from __future__ import annotations

import itertools
import re
from dataclasses import dataclass
from functools import lru_cache
from typing import Union

import numpy as np
import scipy.sparse as sp

from .tensor import Tensor, sparse_apply


class GroupError(ValueError):
    pass


# ---------------------------------------------------------------------------
# elements
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PlanarDiscrete:
    n: int
    k: int = 0
    r: int = 0

    def __post_init__(self):
        if self.n < 1 or not 0 <= self.k < self.n or self.r not in (0, 1):
            raise GroupError(f"invalid planar element n={self.n} k={self.k} r={self.r}")

    @property
    def index(self) -> int:
        """Position on the fiber: rotations first, then reflected rotations."""
        return self.k + self.r * self.n

    @property
    def angle(self) -> float:
        return 2.0 * np.pi * self.k / self.n

    def matrix(self, d: int = 2) -> np.ndarray:
        return planar_matrix(self, d)


@dataclass(frozen=True, eq=False)
class Euclidean:
    O: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        O = np.asarray(self.O, dtype=np.float64)
        t = np.asarray(self.t, dtype=np.float64)
        if O.ndim != 2 or O.shape[0] != O.shape[1] or t.shape != (O.shape[0],):
            raise GroupError(f"bad Euclidean element shapes O{O.shape} t{t.shape}")
        object.__setattr__(self, "O", O)
        object.__setattr__(self, "t", t)

    @property
    def d(self) -> int:
        return self.O.shape[0]

    def check(self, tol: float = 1e-10) -> None:
        if np.max(np.abs(self.O.T @ self.O - np.eye(self.d))) > tol:
            raise GroupError("O is not orthogonal")
        if abs(abs(np.linalg.det(self.O)) - 1.0) > tol:
            raise GroupError("det(O) is not +-1")

    def homogeneous(self) -> np.ndarray:
        M = np.eye(self.d + 1)
        M[: self.d, : self.d] = self.O
        M[: self.d, self.d] = self.t
        return M

    def allclose(self, other: "Euclidean", tol: float = 1e-10) -> bool:
        return (np.max(np.abs(self.O - other.O)) <= tol
                and np.max(np.abs(self.t - other.t)) <= tol)


@dataclass(frozen=True)
class Permutation:
    sigma: tuple

    def __post_init__(self):
        s = tuple(int(i) for i in self.sigma)
        if sorted(s) != list(range(len(s))):
            raise GroupError(f"not a bijection: {s}")
        object.__setattr__(self, "sigma", s)

    @property
    def n(self) -> int:
        return len(self.sigma)


GroupElement = Union[PlanarDiscrete, Euclidean, Permutation]


def identity_like(g: GroupElement) -> GroupElement:
    if isinstance(g, PlanarDiscrete):
        return PlanarDiscrete(g.n)
    if isinstance(g, Euclidean):
        return Euclidean(np.eye(g.d), np.zeros(g.d))
    return Permutation(tuple(range(g.n)))


def compose(g1: GroupElement, g2: GroupElement) -> GroupElement:
    """The product ``g1 g2`` (act with ``g2`` first)."""
    if type(g1) is not type(g2):
        raise GroupError(f"cannot compose {type(g1).__name__} with {type(g2).__name__}")
    if isinstance(g1, PlanarDiscrete):
        if g1.n != g2.n:
            raise GroupError(f"fold mismatch {g1.n} vs {g2.n}")
        sign = -1 if g1.r else 1
        return PlanarDiscrete(g1.n, (g1.k + sign * g2.k) % g1.n, g1.r ^ g2.r)
    if isinstance(g1, Euclidean):
        if g1.d != g2.d:
            raise GroupError(f"dimension mismatch {g1.d} vs {g2.d}")
        return Euclidean(g1.O @ g2.O, g1.O @ g2.t + g1.t)
    if g1.n != g2.n:
        raise GroupError(f"permutation size mismatch {g1.n} vs {g2.n}")
    return Permutation(tuple(g1.sigma[i] for i in g2.sigma))


def inverse(g: GroupElement) -> GroupElement:
    if isinstance(g, PlanarDiscrete):
        if g.r:
            return g
        return PlanarDiscrete(g.n, (-g.k) % g.n, 0)
    if isinstance(g, Euclidean):
        return Euclidean(g.O.T, -g.O.T @ g.t)
    inv = [0] * g.n
    for i, s in enumerate(g.sigma):
        inv[s] = i
    return Permutation(tuple(inv))


def is_identity(g: GroupElement, tol: float = 1e-12) -> bool:
    if isinstance(g, PlanarDiscrete):
        return g.k == 0 and g.r == 0
    if isinstance(g, Euclidean):
        return np.max(np.abs(g.O - np.eye(g.d))) <= tol and np.max(np.abs(g.t)) <= tol
    return g.sigma == tuple(range(g.n))


def planar_matrix(g: PlanarDiscrete, d: int = 2) -> np.ndarray:
    """Matrix of ``g`` acting on R^d (for d=3: about the z axis)."""
    c, s = _cos_sin(g.k, g.n)
    R = np.array([[c, -s], [s, c]])
    if g.r:
        R = R @ np.diag([-1.0, 1.0])
    if d == 2:
        return R
    if d == 3:
        M = np.eye(3)
        M[:2, :2] = R
        return M
    raise GroupError(f"planar elements act on d=2 or 3, got {d}")


def _cos_sin(k: int, n: int) -> tuple[float, float]:
    if (4 * k) % n == 0:
        quarter = (4 * k) // n % 4
        return [(1.0, 0.0), (0.0, 1.0), (-1.0, 0.0), (0.0, -1.0)][quarter]
    a = 2.0 * np.pi * k / n
    return float(np.cos(a)), float(np.sin(a))


def to_euclidean(g: GroupElement, d: int) -> Euclidean:
    if isinstance(g, Euclidean):
        return g
    if isinstance(g, PlanarDiscrete):
        return Euclidean(planar_matrix(g, d), np.zeros(d))
    raise GroupError("permutations have no Euclidean matrix")


# ---------------------------------------------------------------------------
# group specs
# ---------------------------------------------------------------------------

_KINDS = {"c": "Cn", "d": "Dn", "so": "SO", "o": "O", "e": "E", "se": "SE", "s": "Sn"}


@dataclass(frozen=True)
class GroupSpec:
    kind: str  # Cn, Dn, SO, O, E, SE, Sn
    n: int

    @property
    def discrete(self) -> bool:
        return self.kind in ("Cn", "Dn", "Sn")

    @property
    def order(self) -> int:
        if self.kind == "Cn":
            return self.n
        if self.kind == "Dn":
            return 2 * self.n
        if self.kind == "Sn":
            return int(np.prod(range(1, self.n + 1)))
        raise GroupError(f"{self} is continuous")

    def __str__(self) -> str:
        for short, kind in _KINDS.items():
            if kind == self.kind:
                return f"{short}{self.n}"
        return f"{self.kind}{self.n}"


def parse_group(text: str) -> GroupSpec:
    m = re.fullmatch(r"\s*(se|so|c|d|o|e|s)(\d+)\s*", text.lower())
    if not m:
        raise GroupError(f"unrecognised group {text!r} (expected e.g. c4, d8, so3, o3, e3, se3, s5)")
    n = int(m.group(2))
    if n < 1:
        raise GroupError(f"group size must be positive: {text!r}")
    return GroupSpec(_KINDS[m.group(1)], n)


def elements(spec: GroupSpec) -> list:
    """All elements of a discrete group, in fiber order."""
    if spec.kind == "Cn":
        return [PlanarDiscrete(spec.n, k) for k in range(spec.n)]
    if spec.kind == "Dn":
        return [PlanarDiscrete(spec.n, k, r) for r in (0, 1) for k in range(spec.n)]
    if spec.kind == "Sn":
        return [Permutation(p) for p in itertools.permutations(range(spec.n))]
    raise GroupError(f"{spec} is continuous and cannot be enumerated")


def element_index(g: PlanarDiscrete) -> int:
    return g.index


@lru_cache(maxsize=None)
def cayley_table(spec: GroupSpec) -> np.ndarray:
    """``table[a, b] = index(g_a g_b)`` for planar groups."""
    els = elements(spec)
    return np.array([[compose(a, b).index for b in els] for a in els], dtype=np.intp)


def haar_orthogonal(d: int, rng: np.random.Generator, special: bool = False) -> np.ndarray:
    Z = rng.standard_normal((d, d))
    Q, R = np.linalg.qr(Z)
    Q = Q * np.sign(np.diag(R))
    if special and np.linalg.det(Q) < 0:
        Q[:, [0, 1]] = Q[:, [1, 0]]
    return Q


def random_element(spec: GroupSpec, rng: np.random.Generator) -> GroupElement:
    if spec.kind == "Cn":
        return PlanarDiscrete(spec.n, int(rng.integers(spec.n)))
    if spec.kind == "Dn":
        return PlanarDiscrete(spec.n, int(rng.integers(spec.n)), int(rng.integers(2)))
    if spec.kind == "Sn":
        return Permutation(tuple(rng.permutation(spec.n)))
    d = spec.n
    special = spec.kind in ("SO", "SE")
    O = haar_orthogonal(d, rng, special=special) if d > 1 else np.array([[1.0 if special else rng.choice([-1.0, 1.0])]])
    t = rng.standard_normal(d) if spec.kind in ("E", "SE") else np.zeros(d)
    return Euclidean(O, t)


# ---------------------------------------------------------------------------
# actions
# ---------------------------------------------------------------------------

def act_pointcloud(g: GroupElement, X, V=None):
    """Act on positions ``X`` (..., N, d) and optional velocities ``V``.

    Velocities rotate but are not translated; permutations reorder rows.
    """
    X = np.asarray(X, dtype=np.float64)
    if isinstance(g, Permutation):
        if X.shape[-2] != g.n:
            raise GroupError(f"permutation of {g.n} items applied to {X.shape[-2]} points")
        inv = np.array(inverse(g).sigma)
        Xn = X[..., inv, :]
        Vn = None if V is None else np.asarray(V)[..., inv, :]
        return Xn, Vn
    e = to_euclidean(g, X.shape[-1])
    if e.d != X.shape[-1]:
        raise GroupError(f"element of dimension {e.d} applied to {X.shape[-1]}-d points")
    Xn = X @ e.O.T + e.t
    Vn = None if V is None else np.asarray(V, dtype=np.float64) @ e.O.T
    return Xn, Vn


@lru_cache(maxsize=512)
def _rotation_operator(cos_a: float, sin_a: float, flip: int, size: int) -> sp.csr_matrix:
    """Sparse (HW, HW) matrix of ``I'(p) = I(A^-1 p)`` with bilinear, zero-padded sampling."""
    c = (size - 1) / 2.0
    rows, cols = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    x = cols - c
    y = c - rows
    # inverse rotation, then undo the flip (flip is its own inverse)
    xs = cos_a * x + sin_a * y
    ys = -sin_a * x + cos_a * y
    if flip:
        xs = -xs
    src_c = xs + c
    src_r = c - ys
    exact = (abs(cos_a) in (0.0, 1.0)) and (abs(sin_a) in (0.0, 1.0))
    out_idx = (rows * size + cols).ravel()
    if exact:
        rr = np.rint(src_r).astype(int).ravel()
        cc = np.rint(src_c).astype(int).ravel()
        ok = (rr >= 0) & (rr < size) & (cc >= 0) & (cc < size)
        return sp.csr_matrix((np.ones(ok.sum()), (out_idx[ok], (rr * size + cc)[ok])),
                             shape=(size * size, size * size))
    r0 = np.floor(src_r).ravel()
    c0 = np.floor(src_c).ravel()
    fr = src_r.ravel() - r0
    fc = src_c.ravel() - c0
    data, ii, jj = [], [], []
    for dr, dc, w in ((0, 0, (1 - fr) * (1 - fc)), (0, 1, (1 - fr) * fc),
                      (1, 0, fr * (1 - fc)), (1, 1, fr * fc)):
        rr = (r0 + dr).astype(int)
        cc = (c0 + dc).astype(int)
        ok = (rr >= 0) & (rr < size) & (cc >= 0) & (cc < size) & (w > 0)
        data.append(w[ok]); ii.append(out_idx[ok]); jj.append((rr * size + cc)[ok])
    return sp.csr_matrix((np.concatenate(data), (np.concatenate(ii), np.concatenate(jj))),
                         shape=(size * size, size * size))


def image_operator(g: PlanarDiscrete, size: int) -> sp.csr_matrix:
    c, s = _cos_sin(g.k, g.n)
    return _rotation_operator(c, s, g.r, size)


def angle_operator(angle: float, size: int, flip: int = 0) -> sp.csr_matrix:
    """Operator for an arbitrary counterclockwise angle (radians)."""
    return _rotation_operator(float(np.cos(angle)), float(np.sin(angle)), flip, size)


def _check_square(shape):
    if len(shape) < 2 or shape[-1] != shape[-2]:
        raise GroupError(f"image must be square, got spatial shape {tuple(shape[-2:])}")


def act_image(g: PlanarDiscrete, image):
    """Act on ``image`` (..., H, W); Tensors stay differentiable."""
    if not isinstance(g, PlanarDiscrete):
        raise GroupError("images are acted on by planar discrete elements")
    shape = image.shape
    _check_square(shape)
    size = shape[-1]
    op = image_operator(g, size)
    if isinstance(image, Tensor):
        flat = image.reshape(shape[:-2] + (size * size,))
        return sparse_apply(flat, op).reshape(shape)
    arr = np.asarray(image, dtype=np.float64)
    flat = arr.reshape(-1, size * size)
    return np.asarray((op @ flat.T).T).reshape(shape)


def rotate_image_angle(image: np.ndarray, angle: float) -> np.ndarray:
    shape = image.shape
    _check_square(shape)
    op = angle_operator(angle, shape[-1])
    flat = np.asarray(image, dtype=np.float64).reshape(-1, shape[-1] ** 2)
    return np.asarray((op @ flat.T).T).reshape(shape)


def act(g: GroupElement, x):
    """Dispatch on the sample type: images (C, H, W) or point clouds (N, d) / (X, V) tuples."""
    if isinstance(x, tuple):
        return act_pointcloud(g, *x)
    if isinstance(g, PlanarDiscrete) and np.ndim(x) >= 3:
        return act_image(g, x)
    return act_pointcloud(g, x)[0]


def _set_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Symmetric Hausdorff distance (max-norm) between two row sets."""
    diff = np.max(np.abs(a[:, None, :] - b[None, :, :]), axis=-1)
    return float(max(diff.min(axis=1).max(), diff.min(axis=0).max()))


def sample_distance(x, y) -> float:
    if isinstance(x, tuple):
        return max(sample_distance(a, b) for a, b in zip(x, y) if a is not None)
    x = np.asarray(x)
    return float(np.max(np.abs(x - np.asarray(y)))) if x.size else 0.0


def stabilizer_elements(spec: GroupSpec, x, tol: float = 1e-9) -> list:
    """All ``g`` with ``act(g, x)`` equal to ``x`` within ``tol``.

    Images are compared pixelwise. Point clouds under planar groups are compared
    as unordered sets; under ``Sn`` the rows are compared in order.
    """
    if not spec.discrete:
        raise GroupError(f"stabilizer enumeration needs a discrete group, got {spec}")
    if tol < 0:
        raise ValueError("tol must be nonnegative")
    out = []
    arr = x if isinstance(x, tuple) else np.asarray(x, dtype=np.float64)
    as_set = spec.kind in ("Cn", "Dn") and not (isinstance(arr, np.ndarray) and arr.ndim >= 3)
    for g in elements(spec):
        y = act(g, arr)
        if as_set:
            if isinstance(arr, tuple):
                Xa = np.concatenate([a for a in arr if a is not None], axis=-1)
                Ya = np.concatenate([b for b in y if b is not None], axis=-1)
            else:
                Xa, Ya = arr, y
            dev = _set_distance(Xa, Ya)
        else:
            dev = sample_distance(y, arr)
        if dev <= tol:
            out.append(g)
    return out
