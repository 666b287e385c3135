import json
import struct

import numpy as np
import pytest

from eqcanon.groups import PlanarDiscrete, parse_group, stabilizer_elements, elements
from eqcanon.tasks import (GLYPHS, IDX_IMAGES, IDX_LABELS, SHAPE_AXES, IDXError, gen_glyphs, gen_nbody,
                           gen_shapes, glyph_template, leapfrog, load_dataset, load_idx_images, nbody_energy,
                           nbody_initial, read_idx, render_glyph, sample_surface, save_dataset, write_idx)
from eqcanon.tensor import CheckpointError


# ---------------------------------------------------------------------------
# N-body
# ---------------------------------------------------------------------------

def test_single_particle_at_rest():
    X0 = np.array([[0.3, -0.2, 1.0]])
    XT, VT, _ = leapfrog(X0, np.zeros((1, 3)), np.array([1.0]), 1e-3, 100, 0.1)
    np.testing.assert_array_equal(XT, X0)


def test_opposite_charges_symmetric():
    X0 = np.array([[1.0, 0, 0], [-1.0, 0, 0]])
    _, _, traj = leapfrog(X0, np.zeros((2, 3)), np.array([1.0, -1.0]), 1e-3, 500, 0.1, record=True)
    for X, _ in traj:
        np.testing.assert_allclose(X.mean(axis=0), 0.0, atol=1e-12)
        np.testing.assert_allclose(X[0], -X[1], atol=1e-12)
    assert traj[-1][0][0, 0] < 1.0  # attraction


def test_energy_drift_and_centroid():
    for s in range(30):
        X, V, q = nbody_initial(np.random.default_rng(s), 5)
        _, _, traj = leapfrog(X, V, q, 1e-3, 1000, 0.1, record=True)
        E = np.array([nbody_energy(a, b, q, 0.1) for a, b in traj])
        assert abs(E[-1] - E[0]) < 0.01 * abs(E[0])
        # within the run, excursions stay small against the energy scale
        K = 0.5 * np.sum(V * V)
        diff = X[:, None] - X[None]
        U = np.sum(1 / np.sqrt(np.sum(diff ** 2, -1) + 0.01)[np.triu_indices(5, 1)])
        assert np.abs(E - E[0]).max() < 0.01 * (K + U)
        XT = traj[-1][0]
        assert np.linalg.norm(XT.mean(0) - X.mean(0)) < 1e-9


def test_gen_nbody_contract():
    d = gen_nbody(6, n_steps=50, seed=3)
    assert d.X0.shape == (6, 5, 3) and d.q.shape == (6, 5)
    np.testing.assert_allclose(d.V0.mean(axis=1), 0.0, atol=1e-15)
    assert np.all(np.sort(d.q, axis=1) == [-1, -1, 1, 1, 1])
    assert np.isfinite(d.XT).all()
    again = gen_nbody(6, n_steps=50, seed=3)
    np.testing.assert_array_equal(again.XT, d.XT)
    # per-sample seeds: sample i of seed s equals sample 0 of seed s + i
    np.testing.assert_array_equal(gen_nbody(1, n_steps=50, seed=5).XT[0], d.XT[2])
    assert np.sort(gen_nbody(1, n_particles=4, n_steps=1).q[0]).tolist() == [-1, -1, 1, 1]


# ---------------------------------------------------------------------------
# glyphs
# ---------------------------------------------------------------------------

def test_glyph_rotation_is_index_permutation():
    a = render_glyph(3, 7)
    b = render_glyph(3, 7, PlanarDiscrete(4, 1))
    np.testing.assert_array_equal(b, np.rot90(a, 1, axes=(1, 2)))


def test_glyph_templates_distinct_and_asymmetric():
    T = [glyph_template(c) for c in range(len(GLYPHS))]
    dmin = min(np.linalg.norm(T[i] - T[j]) for i in range(len(T)) for j in range(i))
    assert dmin > 1.0
    for t in T:
        assert stabilizer_elements(parse_group("d4"), t[None], 1e-6) == [PlanarDiscrete(4, 0, 0)]
    plus = glyph_template(len(GLYPHS), symmetric_class=True)
    assert len(stabilizer_elements(parse_group("c4"), plus[None], 1e-9)) == 4


def test_gen_glyphs_contract():
    d = gen_glyphs(40, group=parse_group("c8"), seed=1)
    assert d.images.shape == (40, 1, 28, 28)
    assert d.images.min() >= 0.0 and d.images.max() <= 1.0
    assert set(d.labels) <= set(range(8)) and set(d.applied_k) <= set(range(8))
    np.testing.assert_array_equal(gen_glyphs(40, group=parse_group("c8"), seed=1).images, d.images)
    up = gen_glyphs(10, seed=1)
    assert (up.applied_k == 0).all()
    with pytest.raises(ValueError):
        gen_glyphs(1, n_classes=9)
    assert gen_glyphs(50, n_classes=9, symmetric_class=True).labels.max() == 8


# ---------------------------------------------------------------------------
# shapes
# ---------------------------------------------------------------------------

def test_ellipsoid_quadric():
    X = sample_surface("ellipsoid", 500, np.random.default_rng(0))
    np.testing.assert_allclose(np.sum((X / SHAPE_AXES) ** 2, axis=1), 1.0, atol=1e-10)
    with pytest.raises(ValueError):
        sample_surface("cone", 3, np.random.default_rng(0))


def _descriptor(X, bins):
    D = np.linalg.norm(X[:, None] - X[None], axis=-1)[np.triu_indices(len(X), 1)]
    h, _ = np.histogram(D, bins=bins, density=True)
    return h


def test_pose_invariant_descriptor_separates_classes():
    bins = np.linspace(0, 2.5, 26)
    train = gen_shapes(200, noise=0.0, seed=0)
    test = gen_shapes(200, noise=0.0, seed=10_000)
    Ftr = np.array([_descriptor(x, bins) for x in train.points])
    cents = np.array([Ftr[train.labels == c].mean(0) for c in range(4)])
    Fte = np.array([_descriptor(x, bins) for x in test.points])
    pred = np.argmin(((Fte[:, None] - cents[None]) ** 2).sum(-1), axis=1)
    assert np.mean(pred == test.labels) > 0.95


def test_gen_shapes_contract():
    d = gen_shapes(8, n_points=32, seed=2)
    assert d.points.shape == (8, 32, 3) and d.labels.dtype == np.int64
    np.testing.assert_array_equal(gen_shapes(8, n_points=32, seed=2).points, d.points)


# ---------------------------------------------------------------------------
# IDX
# ---------------------------------------------------------------------------

def test_idx_labels_hand_built(tmp_path):
    p = tmp_path / "l.idx"
    p.write_bytes(struct.pack(">II", IDX_LABELS, 3) + bytes([7, 2, 1]))
    assert len(p.read_bytes()) == 11
    assert read_idx(p).tolist() == [7, 2, 1]


def test_idx_images_hand_built(tmp_path):
    p = tmp_path / "i.idx"
    p.write_bytes(struct.pack(">IIII", IDX_IMAGES, 1, 2, 2) + bytes([0, 255, 128, 64]))
    img = read_idx(p)
    np.testing.assert_allclose(img[0], [[0.0, 1.0], [128 / 255, 64 / 255]])
    assert abs(img[0, 1, 0] - 0.502) < 1e-3 and abs(img[0, 1, 1] - 0.251) < 1e-3


def test_idx_errors(tmp_path):
    p = tmp_path / "bad.idx"
    p.write_bytes(struct.pack(">II", 0x00000802, 1) + b"\x00")
    with pytest.raises(IDXError, match="expected .* got 0x00000802"):
        read_idx(p)
    p.write_bytes(struct.pack(">II", IDX_LABELS, 5) + b"\x00\x01")
    with pytest.raises(IDXError, match="truncated payload.*ends at 10"):
        read_idx(p)
    p.write_bytes(struct.pack(">II", IDX_LABELS, 1) + b"\x00")
    with pytest.raises(IDXError, match="expected 0x00000803"):
        read_idx(p, IDX_IMAGES)


def test_idx_round_trip(tmp_path):
    d = gen_glyphs(5, seed=0)
    write_idx(tmp_path / "x.idx", d.images[:, 0], images=True)
    write_idx(tmp_path / "y.idx", d.labels, images=False)
    s = load_idx_images(tmp_path / "x.idx", tmp_path / "y.idx")
    assert np.abs(s.images - d.images).max() <= 0.5 / 255 + 1e-12
    np.testing.assert_array_equal(s.labels, d.labels)


# ---------------------------------------------------------------------------
# dataset files
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("kind", ["nbody", "glyphs", "shapes"])
def test_dataset_round_trip(tmp_path, kind):
    data = {"nbody": lambda: gen_nbody(3, n_steps=5), "glyphs": lambda: gen_glyphs(3),
            "shapes": lambda: gen_shapes(3, n_points=16)}[kind]()
    path = tmp_path / "d.canon1"
    save_dataset(path, data, {"seed": 0})
    back, meta = load_dataset(path)
    assert type(back) is type(data) and meta["count"] == 3 and meta["generator_version"] == "1"
    for k, v in vars(data).items():
        np.testing.assert_array_equal(getattr(back, k), v)
        assert getattr(back, k).dtype == v.dtype or k not in ("labels",)
    sidecar = json.loads((tmp_path / "d.canon1.meta.json").read_text())
    assert sidecar["kind"] == type(data).__name__


def test_corrupt_dataset_file(tmp_path):
    path = tmp_path / "d.canon1"
    save_dataset(path, gen_shapes(2, n_points=4), {})
    raw = path.read_bytes()
    path.write_bytes(raw[:-3])
    with pytest.raises(CheckpointError):
        load_dataset(path)
