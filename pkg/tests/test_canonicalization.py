import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from eqcanon import tensor as T
from eqcanon.canonicalization import (DegenerateFrame, EmptyCloud, EnergyCanonicalizer, ImageCanonicalizer,
                                      PCACanonicalizer, PointCloudCanonicalizer, canonicalize_image,
                                      canonicalize_optim, canonicalize_pointcloud, check_theorem_b1, energy_s,
                                      gram_schmidt, gram_schmidt_tensor, straight_through_select)
from eqcanon.groups import (Euclidean, GroupError, PlanarDiscrete, act, act_image, compose, elements,
                            haar_orthogonal, inverse, parse_group)
from eqcanon.tensor import ParameterStore, Tensor, no_grad


def random_independent(rng, d=3):
    while True:
        V = rng.normal(size=(d, d))
        if abs(np.linalg.det(V)) > 1e-2:
            return V


# ---------------------------------------------------------------------------
# Gram-Schmidt
# ---------------------------------------------------------------------------

def test_gram_schmidt_examples():
    np.testing.assert_array_equal(gram_schmidt(np.eye(3)), np.eye(3))
    np.testing.assert_allclose(gram_schmidt([[2.0, 0, 0], [1.0, 1, 0], [0, 0, 3.0]]), np.eye(3), atol=1e-15)


def test_gram_schmidt_properties():
    rng = np.random.default_rng(0)
    for _ in range(200):
        V = random_independent(rng)
        Q = gram_schmidt(V)
        assert np.abs(Q.T @ Q - np.eye(3)).max() < 1e-10
        np.testing.assert_allclose(Q[:, 0], V[0] / np.linalg.norm(V[0]), atol=1e-14)
        assert np.sign(np.linalg.det(Q)) == np.sign(np.linalg.det(V))
        # span: v_2 lies in span(e_1, e_2)
        assert abs(V[1] @ Q[:, 2]) < 1e-10 * np.linalg.norm(V[1])
        O = haar_orthogonal(3, rng)
        np.testing.assert_allclose(gram_schmidt(V @ O.T), O @ Q, atol=1e-10)


def test_gram_schmidt_degenerate():
    with pytest.raises(DegenerateFrame) as e:
        gram_schmidt([[1.0, 0, 0], [2.0, 0, 0], [0, 0, 1.0]])
    assert e.value.index == 1
    with pytest.raises(DegenerateFrame) as e:
        gram_schmidt([[1.0, 0, 0], [0, 1.0, 0], [1.0, 1.0, 1e-8]])
    assert e.value.index == 2


def test_gram_schmidt_tensor_matches_numpy_and_falls_back():
    rng = np.random.default_rng(1)
    V = np.stack([random_independent(rng) for _ in range(4)])
    Q, bad = gram_schmidt_tensor(V)
    assert not bad.any()
    for i in range(4):
        np.testing.assert_allclose(Q.data[i], gram_schmidt(V[i]), atol=1e-13)
    V[2, 1] = 2 * V[2, 0]
    with pytest.raises(DegenerateFrame) as e:
        gram_schmidt_tensor(V)
    assert e.value.sample == 2 and e.value.index == 1
    Q, bad = gram_schmidt_tensor(V, fallback_identity=True)
    assert bad.tolist() == [False, False, True, False]
    np.testing.assert_array_equal(Q.data[2], np.eye(3))


# ---------------------------------------------------------------------------
# point-cloud canonicalizer
# ---------------------------------------------------------------------------

@pytest.fixture(params=["centroid", "learned"])
def pc_canon(request):
    return PointCloudCanonicalizer(ParameterStore(), np.random.default_rng(2), hidden=8, n_layers=2,
                                   with_velocity=True, translation_mode=request.param)


def test_pointcloud_translation(pc_canon):
    rng = np.random.default_rng(3)
    X, V = rng.normal(size=(12, 3)), rng.normal(size=(12, 3))
    g = canonicalize_pointcloud(pc_canon, X, V)
    t0 = rng.normal(size=3)
    g2 = canonicalize_pointcloud(pc_canon, X + t0, V)
    np.testing.assert_allclose(g2.t, g.t + t0, atol=1e-10)
    np.testing.assert_allclose(g2.O, g.O, atol=1e-10)


def test_pointcloud_rotation(pc_canon):
    rng = np.random.default_rng(4)
    X, V = rng.normal(size=(12, 3)), rng.normal(size=(12, 3))
    g = canonicalize_pointcloud(pc_canon, X, V)
    for _ in range(20):
        O0 = haar_orthogonal(3, rng)
        g2 = canonicalize_pointcloud(pc_canon, X @ O0.T, V @ O0.T)
        np.testing.assert_allclose(g2.O, O0 @ g.O, atol=1e-8)
        np.testing.assert_allclose(g2.t, O0 @ g.t, atol=1e-8)


def test_pointcloud_canonical_sample_invariant(pc_canon):
    rng = np.random.default_rng(5)
    X, V = rng.normal(size=(12, 3)), rng.normal(size=(12, 3))
    g = canonicalize_pointcloud(pc_canon, X, V)
    canon = act((inverse(g)), (X, V))
    for _ in range(10):
        h = Euclidean(haar_orthogonal(3, rng), rng.normal(size=3))
        Xh, Vh = act(h, (X, V))
        gh = canonicalize_pointcloud(pc_canon, Xh, Vh)
        c2 = act(inverse(gh), (Xh, Vh))
        np.testing.assert_allclose(c2[0], canon[0], atol=1e-8)
        np.testing.assert_allclose(c2[1], canon[1], atol=1e-8)


def test_linear_canonicalizer_needs_velocities():
    with pytest.raises(ValueError):
        PointCloudCanonicalizer(ParameterStore(), np.random.default_rng(6), n_layers=0)


@pytest.mark.parametrize("n_layers", [1, 2])
def test_symmetric_cloud_is_degenerate(n_layers):
    tet = np.array([[1.0, 1, 1], [1, -1, -1], [-1, 1, -1], [-1, -1, 1]])
    c = PointCloudCanonicalizer(ParameterStore(), np.random.default_rng(6), n_layers=n_layers)
    with pytest.raises(DegenerateFrame):
        canonicalize_pointcloud(c, tet)
    with pytest.raises(EmptyCloud):
        canonicalize_pointcloud(c, np.zeros((0, 3)))


def test_pca_canonicalizer_is_rotation_invariant_for_generic_clouds():
    rng = np.random.default_rng(7)
    X = rng.normal(size=(30, 3)) * [3.0, 2.0, 1.0]
    c = PCACanonicalizer()
    g = c.element(X)
    base = act(inverse(g), X)
    O0 = haar_orthogonal(3, rng)
    g2 = c.element(X @ O0.T + 1.0)
    np.testing.assert_allclose(act(inverse(g2), X @ O0.T + 1.0), base, atol=1e-8)


# ---------------------------------------------------------------------------
# straight-through selection
# ---------------------------------------------------------------------------

def test_straight_through_examples():
    idx, oh = straight_through_select(np.array([[0.1, 2.0, 0.3]]))
    assert idx.tolist() == [1]
    np.testing.assert_array_equal(oh.data, [[0.0, 1.0, 0.0]])
    idx, oh = straight_through_select(np.zeros((1, 5)))
    np.testing.assert_array_equal(oh.data, [[1.0, 0, 0, 0, 0]])


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 16), st.integers(0, 2 ** 31))
def test_straight_through_gradient_is_softmax_jacobian(n, seed):
    rng = np.random.default_rng(seed)
    z = rng.normal(size=(1, n)) * 3
    w = rng.normal(size=n)
    x = Tensor(z, requires_grad=True)
    _, oh = straight_through_select(x)
    assert set(np.unique(oh.data)) <= {0.0, 1.0} and oh.data.sum() == 1.0
    T.run_backward(T.tsum(oh * Tensor(w[None])))
    p = np.exp(z[0] - z[0].max())
    p /= p.sum()
    J = np.diag(p) - np.outer(p, p)
    np.testing.assert_allclose(x.grad[0], J @ w, atol=1e-12, rtol=0)


# ---------------------------------------------------------------------------
# image canonicalizer
# ---------------------------------------------------------------------------

def _image_canon(group="c4", size=12, channels=(4, 4, 1), mode="global", seed=8):
    return ImageCanonicalizer(ParameterStore(), np.random.default_rng(seed), parse_group(group), size=size,
                              channels=channels, mode=mode, kernel=3)


@pytest.mark.parametrize("group", ["c4", "d4"])
def test_image_canonical_sample_exactly_invariant(group):
    c = _image_canon(group)
    rng = np.random.default_rng(9)
    for _ in range(10):
        img = rng.random((1, 12, 12))
        g0, canon0 = canonicalize_image(c, img)
        for g in elements(parse_group(group)):
            g1, canon1 = canonicalize_image(c, act_image(g, img))
            np.testing.assert_array_equal(canon1, canon0)
            assert g1 == compose(g, g0)


def test_constant_image_ties_to_identity():
    c = _image_canon()
    img = np.full((1, 12, 12), 0.7)
    g, canon = canonicalize_image(c, img)
    assert g == PlanarDiscrete(4, 0)
    np.testing.assert_array_equal(canon, img)
    with no_grad():
        assert not c(img[None]).unique[0]


def test_template_filter_recovers_template():
    rng = np.random.default_rng(10)
    templ = rng.random((1, 12, 12))
    p = ParameterStore()
    c = ImageCanonicalizer(p, rng, parse_group("c4"), size=12, channels=(1,))
    p["canon.lift.W"].data[...] = templ[None]
    p["canon.lift.b"].data[...] = 0.0
    for g in elements(parse_group("c4")):
        h, canon = canonicalize_image(c, act_image(g, templ))
        assert h == g
        np.testing.assert_array_equal(canon, templ)


def test_non_square_and_bad_group():
    c = _image_canon()
    with pytest.raises(GroupError):
        canonicalize_image(c, np.zeros((1, 12, 11)))
    with pytest.raises(GroupError):
        ImageCanonicalizer(ParameterStore(), np.random.default_rng(0), parse_group("so2"))


@pytest.mark.parametrize("group,channels", [("c4", (4, 4, 1)), ("c8", (4, 4, 1)), ("c16", (4, 1)), ("d4", (4, 4, 1))])
def test_fast_inference_matches_training_path(group, channels):
    c = _image_canon(group, channels=channels)
    imgs = np.random.default_rng(11).random((6, 1, 12, 12))
    with no_grad():
        fast = c(imgs)
    slow = c(imgs)  # grad enabled: rotated-stack path
    assert [g.index for g in fast.elements] == [g.index for g in slow.elements]
    np.testing.assert_allclose(fast.logits.data, slow.logits.data, atol=1e-12)
    np.testing.assert_array_equal(fast.canonical.data, slow.canonical.data)


def test_local_mode_invariant_to_rotation_and_circular_shift():
    c = _image_canon(mode="local")
    img = np.random.default_rng(12).random((1, 12, 12))
    with no_grad():
        base = c(img[None])
        rolled = c(np.roll(img, (3, 5), axis=(1, 2))[None])
        rot = c(act_image(PlanarDiscrete(4, 1), img)[None])
    assert base.elements == rolled.elements
    assert rot.elements[0] == compose(PlanarDiscrete(4, 1), base.elements[0])
    np.testing.assert_allclose(rot.canonical.data, base.canonical.data, atol=1e-12)


# ---------------------------------------------------------------------------
# optimization approach
# ---------------------------------------------------------------------------

def _template_energy(templ):
    def E(xs):
        xs = xs.data if isinstance(xs, Tensor) else np.asarray(xs)
        if xs.ndim == templ.ndim:
            return float(np.sum((xs - templ) ** 2))
        return Tensor(np.sum((xs - templ) ** 2, axis=tuple(range(1, xs.ndim))))
    return E


def test_energy_s_identity_and_eq5():
    rng = np.random.default_rng(13)
    x = rng.random((1, 6, 6))
    E = lambda z: float(np.sum(np.asarray(z) * np.arange(36).reshape(1, 6, 6)))
    spec = parse_group("d4")
    assert energy_s(E, PlanarDiscrete(4, 0, 0), x) == E(x)
    for g1 in elements(spec):
        for g in elements(spec):
            assert energy_s(E, g, act(g1, x)) == energy_s(E, compose(inverse(g1), g), x)


def test_grid_recovers_rotation():
    rng = np.random.default_rng(14)
    templ = rng.normal(size=(7, 2))
    spec = parse_group("c8")
    c = EnergyCanonicalizer(_template_energy(templ), "grid", spec)
    for g0 in elements(spec):
        x = act(g0, templ)
        # brute-force oracle
        s = [energy_s(_template_energy(templ), g, x) for g in elements(spec)]
        assert elements(spec)[int(np.argmin(s))] == g0
        assert canonicalize_optim(c, x) == g0


def test_grid_tie_goes_to_lowest_index():
    pair = np.array([[1.0, 0.0], [-1.0, 0.0]])
    c = EnergyCanonicalizer(_template_energy(pair), "grid", parse_group("c4"))
    assert canonicalize_optim(c, pair) == PlanarDiscrete(4, 0)
    assert canonicalize_optim(c, act(PlanarDiscrete(4, 1), pair)) == PlanarDiscrete(4, 1)


def test_gradient_mode_closed_form():
    theta0 = 1.2
    X = np.array([[[np.cos(theta0), np.sin(theta0)]]])

    def E(Xr):
        return T.tsum(T.tsum(1.0 - Xr[..., :1], axis=-1), axis=-1)

    c = EnergyCanonicalizer(E, "gradient", steps=5, lr=0.1, n_init=1)
    theta = c.angles(X).data[0]
    # oracle: theta <- theta - lr * d/dtheta [1 - cos(theta0 - theta)] = theta + lr sin(theta0 - theta)
    ref = [0.0]
    for _ in range(5):
        ref.append(ref[-1] + 0.1 * np.sin(theta0 - ref[-1]))
    np.testing.assert_allclose(c.trace[0][:, 0], ref, atol=1e-8)
    gaps = np.abs(np.array(ref) - theta0)
    assert np.all(np.diff(gaps) < 0)
    assert abs(theta - ref[-1]) < 1e-8


def test_gradient_mode_differentiates_through_steps():
    rng = np.random.default_rng(15)
    X0 = rng.normal(size=(1, 5, 2))
    w = rng.normal(size=(2,))

    def make(X):
        def E(Xr):
            return T.tsum(T.tsum(T.square(Xr) * Tensor(np.broadcast_to(w, Xr.shape)), axis=-1) * Xr[..., 0], axis=-1)
        return EnergyCanonicalizer(E, "gradient", steps=5, lr=0.1, n_init=2).angles(X)

    r = T.finite_diff_check(lambda X: T.tsum(make(X)), X0, step=1e-5)
    assert r.max_rel_error < 1e-4


def test_theorem_b1_checker():
    rng = np.random.default_rng(16)
    W1 = rng.normal(size=(12, 8))
    W2 = rng.normal(size=8)
    E = lambda x: float(np.tanh(np.asarray(x).reshape(-1) @ W1) @ W2)
    xs = [rng.normal(size=(6, 2)) for _ in range(20)]
    rep = check_theorem_b1(E, parse_group("c8"), xs, tol=1e-12)
    assert rep.n_triples == 20 * 64 and rep.condition1_holds and rep.condition2_holds
    const = check_theorem_b1(lambda x: 0.0, parse_group("c8"), xs)
    assert const.condition1_holds and not const.condition2_holds
    assert const.condition2_failures == list(range(20))
    imgs = [rng.random((1, 6, 6)) for _ in range(5)]
    Ei = lambda x: float(np.sum(np.asarray(x) * np.arange(36).reshape(1, 6, 6)))
    assert check_theorem_b1(Ei, parse_group("d4"), imgs, tol=0.0).condition1_violations == 0
    with pytest.raises(GroupError):
        check_theorem_b1(E, parse_group("so2"), xs)


def test_theorem_b1_symmetric_sample_satisfies_condition2():
    pair = np.array([[1.0, 0.2], [-1.0, -0.2]])  # stabilizer {0, 180}
    E = _template_energy(pair)
    rep = check_theorem_b1(E, parse_group("c4"), [pair])
    assert rep.condition2_holds
