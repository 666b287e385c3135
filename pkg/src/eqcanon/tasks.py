"""Offline data: charged N-body trajectories, rotated glyph images, synthetic shapes, IDX files."""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .groups import GroupSpec, PlanarDiscrete, act_image, haar_orthogonal, random_element
from .tensor import load_tensors, save_tensors

GENERATOR_VERSION = "1"


# ---------------------------------------------------------------------------
# N-body
# ---------------------------------------------------------------------------

@dataclass
class NBodySet:
    X0: np.ndarray  # (S, N, 3)
    V0: np.ndarray
    q: np.ndarray  # (S, N)
    XT: np.ndarray

    def __len__(self):
        return len(self.X0)

    def inputs(self):
        return self.X0, self.V0, self.q

    def subset(self, idx):
        return NBodySet(self.X0[idx], self.V0[idx], self.q[idx], self.XT[idx])


def coulomb_accel(X: np.ndarray, q: np.ndarray, softening: float) -> np.ndarray:
    """``a_i = sum_j q_i q_j (r_i - r_j) / (|r_i - r_j|^2 + eps^2)^(3/2)`` (unit masses)."""
    diff = X[..., :, None, :] - X[..., None, :, :]
    r2 = np.sum(diff * diff, axis=-1) + softening ** 2
    inv3 = r2 ** -1.5
    qq = q[..., :, None] * q[..., None, :]
    w = qq * inv3
    n = X.shape[-2]
    w[..., np.arange(n), np.arange(n)] = 0.0
    return np.sum(w[..., None] * diff, axis=-2)


def nbody_energy(X: np.ndarray, V: np.ndarray, q: np.ndarray, softening: float) -> np.ndarray:
    kinetic = 0.5 * np.sum(V * V, axis=(-1, -2))
    diff = X[..., :, None, :] - X[..., None, :, :]
    r = np.sqrt(np.sum(diff * diff, axis=-1) + softening ** 2)
    qq = q[..., :, None] * q[..., None, :]
    n = X.shape[-2]
    iu = np.triu_indices(n, 1)
    potential = np.sum((qq / r)[..., iu[0], iu[1]], axis=-1)
    return kinetic + potential


def leapfrog(X, V, q, dt: float, n_steps: int, softening: float, record: bool = False):
    """Kick-drift-kick integration. Returns final (X, V) and optionally the trajectory."""
    X = np.array(X, dtype=np.float64)
    V = np.array(V, dtype=np.float64)
    a = coulomb_accel(X, q, softening)
    traj = [(X.copy(), V.copy())] if record else None
    for _ in range(n_steps):
        V += 0.5 * dt * a
        X += dt * V
        a = coulomb_accel(X, q, softening)
        V += 0.5 * dt * a
        if record:
            traj.append((X.copy(), V.copy()))
    return X, V, traj


def nbody_initial(rng: np.random.Generator, n_particles: int):
    X0 = rng.normal(0.0, 1.0, size=(n_particles, 3))
    V0 = rng.normal(0.0, 0.5, size=(n_particles, 3))
    V0 -= V0.mean(axis=0)
    n_neg = n_particles // 2
    q = np.array([1.0] * (n_particles - n_neg) + [-1.0] * n_neg)
    q = rng.permutation(q)
    return X0, V0, q


def gen_nbody(n_samples: int, n_particles: int = 5, dt: float = 1e-3, n_steps: int = 1000,
              softening: float = 0.1, seed: int = 0) -> NBodySet:
    """Charged particles with zero total momentum, integrated for ``n_steps``.

    Sample ``i`` draws its initial state from ``default_rng(seed + i)``.
    """
    X0, V0, q = [], [], []
    for i in range(n_samples):
        x, v, c = nbody_initial(np.random.default_rng(seed + i), n_particles)
        X0.append(x); V0.append(v); q.append(c)
    X0 = np.array(X0).reshape(n_samples, n_particles, 3)
    V0 = np.array(V0).reshape(n_samples, n_particles, 3)
    q = np.array(q).reshape(n_samples, n_particles)
    XT, _, _ = leapfrog(X0, V0, q, dt, n_steps, softening)
    return NBodySet(X0, V0, q, XT)


# ---------------------------------------------------------------------------
# glyphs
# ---------------------------------------------------------------------------

# Polylines in [-1, 1]^2, y up. None of them is invariant under a nontrivial
# rotation or reflection.
GLYPHS = [
    [[(-0.5, -0.9), (-0.5, 0.9), (0.6, 0.9)], [(-0.5, 0.1), (0.3, 0.1)]],  # F
    [[(0.3, 0.9), (0.3, -0.6), (0.0, -0.9), (-0.5, -0.7)], [(0.0, 0.9), (0.6, 0.9)]],  # J
    [[(-0.4, -0.9), (-0.4, 0.9), (0.4, 0.9), (0.6, 0.5), (0.4, 0.1), (-0.4, 0.1)]],  # P
    [[(-0.6, 0.9), (0.6, 0.9), (-0.2, -0.9)], [(-0.2, 0.0), (0.4, 0.0)]],  # 7
    [[(0.3, -0.9), (0.3, 0.9), (-0.6, -0.2), (0.7, -0.2)]],  # 4
    [[(0.6, 0.7), (0.0, 0.9), (-0.6, 0.4), (-0.6, -0.4), (0.0, -0.9), (0.6, -0.5), (0.6, 0.0), (0.1, 0.0)]],  # G
    [[(-0.5, -0.9), (-0.5, 0.9), (0.3, 0.9), (0.5, 0.5), (0.3, 0.1), (-0.5, 0.1)], [(0.0, 0.1), (0.6, -0.9)]],  # R
    [[(-0.6, 0.9), (0.0, 0.0), (0.6, 0.9)], [(0.0, 0.0), (0.0, -0.9), (-0.4, -0.9)]],  # y with a foot
]
SYMMETRIC_GLYPH = [[(-0.8, 0.0), (0.8, 0.0)], [(0.0, -0.8), (0.0, 0.8)]]  # plus sign, C4-symmetric

GLYPH_RADIUS_PX = 9.0
STROKE_HALF_WIDTH = 1.0


def _segment_distance(px, py, a, b):
    ax, ay = a
    bx, by = b
    dx, dy = bx - ax, by - ay
    L2 = dx * dx + dy * dy
    t = np.clip(((px - ax) * dx + (py - ay) * dy) / L2, 0.0, 1.0) if L2 > 0 else 0.0
    cx, cy = ax + t * dx, ay + t * dy
    return np.hypot(px - cx, py - cy)


def render_strokes(strokes, size: int = 28, jitter: np.ndarray | None = None) -> np.ndarray:
    """Anti-aliased rasterisation of polylines given in unit coordinates."""
    c = (size - 1) / 2.0
    rows, cols = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    px, py = cols - c, c - rows
    dist = np.full((size, size), np.inf)
    k = 0
    for line in strokes:
        pts = []
        for (x, y) in line:
            off = jitter[k] if jitter is not None else (0.0, 0.0)
            pts.append((x * GLYPH_RADIUS_PX + off[0], y * GLYPH_RADIUS_PX + off[1]))
            k += 1
        for a, b in zip(pts[:-1], pts[1:]):
            dist = np.minimum(dist, _segment_distance(px, py, a, b))
    return np.clip(STROKE_HALF_WIDTH + 0.5 - dist, 0.0, 1.0)


def glyph_strokes(cls: int, symmetric_class: bool = False):
    if symmetric_class and cls == len(GLYPHS):
        return SYMMETRIC_GLYPH
    return GLYPHS[cls]


def glyph_template(cls: int, size: int = 28, symmetric_class: bool = False) -> np.ndarray:
    return render_strokes(glyph_strokes(cls, symmetric_class), size)


def render_glyph(cls: int, seed: int, g: PlanarDiscrete | None = None, size: int = 28,
                 jitter_px: float = 1.0, symmetric_class: bool = False) -> np.ndarray:
    """Deterministic (1, size, size) image for ``(cls, seed, g)``."""
    strokes = glyph_strokes(cls, symmetric_class)
    nv = sum(len(s) for s in strokes)
    rng = np.random.default_rng(seed)
    jitter = rng.uniform(-jitter_px, jitter_px, size=(nv, 2))
    img = render_strokes(strokes, size, jitter)[None]
    if g is not None:
        img = np.clip(act_image(g, img), 0.0, 1.0)
    return img


@dataclass
class ImageSet:
    images: np.ndarray  # (S, C, H, W)
    labels: np.ndarray  # (S,)
    applied_k: np.ndarray
    applied_r: np.ndarray

    def __len__(self):
        return len(self.images)

    def subset(self, idx):
        return ImageSet(self.images[idx], self.labels[idx], self.applied_k[idx], self.applied_r[idx])


def gen_glyphs(n_samples: int, n_classes: int = 8, group: GroupSpec | None = None, seed: int = 0,
               size: int = 28, jitter_px: float = 1.0, symmetric_class: bool = False) -> ImageSet:
    """Jittered glyphs, each acted on by a uniformly random element of ``group``."""
    n_avail = len(GLYPHS) + (1 if symmetric_class else 0)
    if n_classes > n_avail:
        raise ValueError(f"only {n_avail} glyph classes available")
    imgs, labels, ks, rs = [], [], [], []
    for i in range(n_samples):
        rng = np.random.default_rng(seed + i)
        cls = int(rng.integers(n_classes))
        g = random_element(group, rng) if group is not None else None
        sub_seed = int(rng.integers(2 ** 31))
        imgs.append(render_glyph(cls, sub_seed, g, size, jitter_px, symmetric_class))
        labels.append(cls)
        ks.append(g.k if g is not None else 0)
        rs.append(g.r if g is not None else 0)
    return ImageSet(np.array(imgs).reshape(n_samples, 1, size, size), np.array(labels, dtype=np.int64),
                    np.array(ks), np.array(rs))


# ---------------------------------------------------------------------------
# shapes
# ---------------------------------------------------------------------------

SHAPE_NAMES = ("ellipsoid", "box", "dumbbell", "torus")
SHAPE_AXES = np.array([1.0, 0.65, 0.4])


def sample_surface(kind: str, n: int, rng: np.random.Generator, axes=SHAPE_AXES) -> np.ndarray:
    """Points on a canonical (unposed, noise-free) surface."""
    if kind == "ellipsoid":
        d = rng.normal(size=(n, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        return d * axes
    if kind == "box":
        a = axes
        areas = np.array([a[1] * a[2], a[0] * a[2], a[0] * a[1]])
        face_axis = rng.choice(3, size=n, p=areas / areas.sum())
        pts = rng.uniform(-1, 1, size=(n, 3)) * a
        side = rng.choice([-1.0, 1.0], size=n)
        pts[np.arange(n), face_axis] = side * a[face_axis]
        return pts
    if kind == "dumbbell":
        r = 0.45 * axes[1]
        d = rng.normal(size=(n, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        centers = np.where(rng.random(n)[:, None] < 0.5, -1.0, 1.0) * np.array([axes[0] - r, 0, 0])
        return centers + r * d * np.array([1.0, 1.0, 0.8])
    if kind == "torus":
        R, r = 0.7 * axes[0], 0.25 * axes[0]
        u = rng.uniform(0, 2 * np.pi, n)
        v = rng.uniform(0, 2 * np.pi, n)
        return np.stack([(R + r * np.cos(v)) * np.cos(u), 0.8 * (R + r * np.cos(v)) * np.sin(u), r * np.sin(v)], axis=1)
    raise ValueError(f"unknown surface {kind!r}")


@dataclass
class ShapeSet:
    points: np.ndarray  # (S, N, 3)
    labels: np.ndarray

    def __len__(self):
        return len(self.points)

    def subset(self, idx):
        return ShapeSet(self.points[idx], self.labels[idx])


def gen_shapes(n_samples: int, n_points: int = 128, n_classes: int = 4, seed: int = 0,
               noise: float = 0.02, pose: bool = True) -> ShapeSet:
    pts, labels = [], []
    for i in range(n_samples):
        rng = np.random.default_rng(seed + i)
        cls = int(rng.integers(n_classes))
        axes = SHAPE_AXES * rng.uniform(0.9, 1.1, size=3)
        X = sample_surface(SHAPE_NAMES[cls], n_points, rng, axes)
        X = X + noise * rng.normal(size=X.shape)
        if pose:
            O = haar_orthogonal(3, rng, special=True)
            X = X @ O.T + rng.normal(size=3)
        pts.append(X)
        labels.append(cls)
    return ShapeSet(np.array(pts), np.array(labels, dtype=np.int64))


# ---------------------------------------------------------------------------
# IDX files
# ---------------------------------------------------------------------------

class IDXError(ValueError):
    pass


IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801


def read_idx(path, expect: int | None = None) -> np.ndarray:
    """Parse an unsigned-byte IDX file. Images come back scaled to [0, 1]."""
    data = Path(path).read_bytes()
    if len(data) < 4:
        raise IDXError(f"{path}: truncated header at byte 0 (file has {len(data)} bytes)")
    magic = struct.unpack(">I", data[:4])[0]
    if magic not in (IDX_IMAGES, IDX_LABELS) or (expect is not None and magic != expect):
        want = f"0x{expect:08x}" if expect is not None else "0x00000801 or 0x00000803"
        raise IDXError(f"{path}: bad magic at byte 0: expected {want}, got 0x{magic:08x}")
    ndim = magic & 0xFF
    head = 4 + 4 * ndim
    if len(data) < head:
        raise IDXError(f"{path}: truncated dimension header at byte {len(data)} (need {head})")
    dims = struct.unpack(">" + "I" * ndim, data[4:head])
    count = int(np.prod(dims))
    if len(data) < head + count:
        raise IDXError(f"{path}: truncated payload: need bytes {head}..{head + count}, file ends at {len(data)}")
    arr = np.frombuffer(data, dtype=np.uint8, count=count, offset=head).reshape(dims)
    if magic == IDX_IMAGES:
        return arr.astype(np.float64) / 255.0
    return arr.astype(np.int64)


def write_idx(path, arr: np.ndarray, images: bool) -> None:
    arr = np.asarray(arr)
    if images:
        arr = np.rint(np.clip(arr, 0, 1) * 255.0)
    raw = arr.astype(np.uint8)
    magic = (0x0800 | raw.ndim)
    header = struct.pack(">I", magic) + struct.pack(">" + "I" * raw.ndim, *raw.shape)
    Path(path).write_bytes(header + raw.tobytes())


def load_idx_images(images_path, labels_path) -> ImageSet:
    imgs = read_idx(images_path, IDX_IMAGES)
    labels = read_idx(labels_path, IDX_LABELS)
    if len(imgs) != len(labels):
        raise IDXError(f"{len(imgs)} images but {len(labels)} labels")
    n = len(imgs)
    return ImageSet(imgs[:, None].astype(np.float64), labels, np.zeros(n, int), np.zeros(n, int))


# ---------------------------------------------------------------------------
# dataset files
# ---------------------------------------------------------------------------

def save_dataset(path, data, meta: dict) -> None:
    """CANON1 arrays plus a ``.meta.json`` sidecar."""
    path = Path(path)
    arrays = {k: np.asarray(v, dtype=np.float64) for k, v in vars(data).items()}
    save_tensors(path, arrays)
    sidecar = dict(meta, kind=type(data).__name__, count=len(data), generator_version=GENERATOR_VERSION)
    path.with_suffix(path.suffix + ".meta.json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")


_KINDS = {"NBodySet": NBodySet, "ImageSet": ImageSet, "ShapeSet": ShapeSet}
_INT_FIELDS = {"labels", "applied_k", "applied_r"}


def load_dataset(path):
    path = Path(path)
    meta = json.loads(path.with_suffix(path.suffix + ".meta.json").read_text())
    arrays = load_tensors(path)
    fields = {k: (v.astype(np.int64) if k in _INT_FIELDS else v) for k, v in arrays.items()}
    return _KINDS[meta["kind"]](**fields), meta
