"""Network building blocks.

Vector-Neuron layers and the VN Deep Sets head are O(d)-equivariant and are
used as point-cloud canonicalizers. Lifting and 1x1 group convolutions form the
image canonicalizer. The MLP / CNN / Deep Sets / GNN predictors make no
equivariance promise at all.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .groups import GroupSpec, cayley_table, elements, image_operator, inverse
from .tensor import ParameterStore, ShapeError, Tensor

VN_EPS = 1e-12


def init_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    a = np.sqrt(1.0 / max(fan_in, 1))
    return rng.uniform(-a, a, size=shape)


def activation(name: str):
    return {"relu": T.relu, "tanh": T.tanh, "silu": T.silu}[name]


def linear(x: Tensor, W: Tensor, b: Tensor | None = None) -> Tensor:
    y = T.matmul(x, W)
    if b is not None:
        y = y + T.broadcast_to(b, y.shape)
    return y


# ---------------------------------------------------------------------------
# Vector Neurons
# ---------------------------------------------------------------------------

def vn_linear(W, V) -> Tensor:
    """Mix channels of ``V`` (..., C, d) with ``W`` (C', C). No bias."""
    W, V = T.as_tensor(W), T.as_tensor(V)
    if W.ndim != 2 or V.ndim < 2 or W.shape[1] != V.shape[-2]:
        raise ShapeError(f"vn_linear shape mismatch: W{W.shape} vs V{V.shape}")
    return T.matmul(W, V)


def vn_nonlinearity(V, U, stats: dict | None = None) -> Tensor:
    """Project each vector off its learned direction when it points away from it.

    ``q = U V``; a channel ``v`` with ``<v, q> < 0`` becomes
    ``v - <v, q_hat> q_hat``. Channels whose direction has norm <= 1e-12 pass
    through unchanged and are counted in ``stats["degenerate"]``.
    """
    V = T.as_tensor(V)
    q = vn_linear(U, V)
    qn = T.norm(q)
    degenerate = qn.data <= VN_EPS
    if stats is not None and degenerate.any():
        stats["degenerate"] = stats.get("degenerate", 0) + int(degenerate.sum())
    q_hat = q / T.expand_to(qn + Tensor(degenerate.astype(float)), q.shape)
    along = T.dot(V, q_hat)
    flip = (T.dot(V, q).data < 0) & ~degenerate
    coef = along * Tensor(flip.astype(float))
    return V - T.expand_to(coef, V.shape) * q_hat


def vn_lift(X, Vel=None) -> Tensor:
    """Per-point vector channels ``[x, |x| x]``, plus ``[v, |v| v, <x,v> x, <x,v> v]`` with velocities.

    Output (..., N, C, d). The mixed terms let a linear VN head span a full
    frame after pooling, where the means of centred x and of v vanish.
    """
    X = T.as_tensor(X)
    chans = [X, T.expand_to(T.norm(X), X.shape) * X]
    if Vel is not None:
        Vel = T.as_tensor(Vel)
        xv = T.expand_to(T.dot(X, Vel), X.shape)
        chans += [Vel, T.expand_to(T.norm(Vel), Vel.shape) * Vel, xv * X, xv * Vel]
    return T.stack(chans, axis=-2)


class VNDeepSets:
    """Vector-Neuron Deep Sets head returning ``n_out`` equivariant vectors.

    ``n_layers = 0`` is the purely linear variant: one channel-mixing map on the
    lifted features followed by mean pooling.
    """

    def __init__(self, params: ParameterStore, prefix: str, in_channels: int, hidden: int,
                 n_layers: int, n_out: int, rng: np.random.Generator):
        self.prefix = prefix
        self.n_layers = n_layers
        self.stats: dict = {}
        self.layers = []
        c = in_channels
        for i in range(n_layers):
            W = params.add(f"{prefix}l{i}.W", init_uniform(rng, (hidden, c), c))
            Wp = params.add(f"{prefix}l{i}.Wpool", init_uniform(rng, (hidden, c), c)) if i > 0 else None
            U = params.add(f"{prefix}l{i}.U", init_uniform(rng, (hidden, hidden), hidden))
            self.layers.append((W, Wp, U))
            c = hidden
        self.W_out = params.add(f"{prefix}out.W", init_uniform(rng, (n_out, c), c))

    def __call__(self, X, Vel=None) -> Tensor:
        X = T.as_tensor(X)
        if X.shape[-2] == 0:
            raise ValueError("empty point cloud")
        h = vn_lift(X, Vel)  # (..., N, C, d)
        for W, Wp, U in self.layers:
            z = vn_linear(W, h)
            if Wp is not None:
                pooled = T.mean(h, axis=-3, keepdims=True)
                z = z + T.broadcast_to(vn_linear(Wp, pooled), z.shape)
            h = vn_nonlinearity(z, U, self.stats)
        pooled = T.mean(h, axis=-3)  # (..., C, d)
        return vn_linear(self.W_out, pooled)


def vn_deepsets(net: VNDeepSets, X, Vel=None) -> Tensor:
    return net(X, Vel)


# ---------------------------------------------------------------------------
# group convolutions on planar discrete groups
# ---------------------------------------------------------------------------

def stacked_inverse_operator(spec: GroupSpec, size: int):
    import scipy.sparse as sp

    key = (spec, size)
    if key not in _STACK_CACHE:
        ops = [image_operator(inverse(g), size) for g in elements(spec)]
        _STACK_CACHE[key] = sp.vstack(ops).tocsr()
    return _STACK_CACHE[key]


_STACK_CACHE: dict = {}
_PADDED_CACHE: dict = {}


def padded_inverse_operator(spec: GroupSpec, size: int):
    """The stacked operator as dense ``(cols, weights)`` of shape (|G|, HW, K).

    Entries keep the CSR row order so that a sequential multiply-add over K
    reproduces the sparse product bit for bit.
    """
    key = (spec, size)
    if key not in _PADDED_CACHE:
        op = stacked_inverse_operator(spec, size)
        nnz = np.diff(op.indptr)
        K = int(nnz.max()) if len(nnz) else 1
        rows = op.shape[0]
        cols = np.zeros((rows, K), dtype=np.intp)
        w = np.zeros((rows, K))
        slot = np.arange(op.nnz) - np.repeat(op.indptr[:-1], nnz)
        r = np.repeat(np.arange(rows), nnz)
        cols[r, slot] = op.indices
        w[r, slot] = op.data
        HW = size * size
        _PADDED_CACHE[key] = (cols.reshape(-1, HW, K), w.reshape(-1, HW, K))
    return _PADDED_CACHE[key]


def apply_selected(images: np.ndarray, spec: GroupSpec, idx: np.ndarray) -> np.ndarray:
    """``act(g_idx[b]^-1, images[b])`` for one element per sample, cost independent of |G|."""
    B, C, H, W = images.shape
    cols, w = padded_inverse_operator(spec, H)
    images = np.ascontiguousarray(images)
    HW = H * W
    base = (np.arange(B * C) * HW).reshape(B, C, 1)
    src = images.reshape(-1)
    out = np.zeros((B, C, HW))
    for k in range(cols.shape[-1]):
        ck = cols[idx, :, k][:, None, :] + base  # (B, C, HW) flat source indices
        out = out + w[idx, :, k][:, None, :] * src[ck]
    return out.reshape(B, C, H, W)


def rotated_stack(images, spec: GroupSpec) -> Tensor:
    """``out[b, m] = act(g_m^-1, images[b])`` for every group element.

    Input (B, C, H, W), output (B, |G|, C, H, W). At multiples of 90 degrees the
    copies are exact pixel permutations.
    """
    images = T.as_tensor(images)
    B, C, H, W = images.shape
    if H != W:
        raise ShapeError(f"image must be square, got {H}x{W}")
    op = stacked_inverse_operator(spec, H)
    G = op.shape[0] // (H * W)
    flat = T.reshape(images, (B, C, H * W))
    out = T.sparse_apply(flat, op)  # (B, C, G*HW)
    out = T.reshape(out, (B, C, G, H, W))
    return T.transpose(out, (0, 2, 1, 3, 4))


def lifting_conv(filters, stack, bias=None) -> Tensor:
    """Correlate a rotated stack (B, |G|, C, H, W) with full-size filters (O, C, H, W).

    ``F[b, m, o] = <filters[o], act(g_m^-1, I_b)>``; rotating the input by ``g``
    moves fiber entry ``m`` to ``g m``.
    """
    filters, stack = T.as_tensor(filters), T.as_tensor(stack)
    B, G, C, H, W = stack.shape
    if filters.shape[1:] != (C, H, W):
        raise ShapeError(f"lifting filter {filters.shape} does not match image {(C, H, W)}")
    O = filters.shape[0]
    flat = T.reshape(stack, (B, G, C * H * W))
    wmat = T.transpose(T.reshape(filters, (O, C * H * W)), (1, 0))
    return linear(flat, wmat, bias)


def lifting_conv_local(filters, stack, bias=None) -> Tensor:
    """Local lifting: circular conv of every rotated copy, ReLU, spatial mean.

    Invariant to circular translations of the input, equivariant (fiber shift)
    to rotations. Output (B, |G|, O).
    """
    filters, stack = T.as_tensor(filters), T.as_tensor(stack)
    B, G, C, H, W = stack.shape
    O, _, k, _ = filters.shape
    x = T.reshape(stack, (B * G, C, H, W))
    y = T.conv2d(x, filters, stride=1, padding=k // 2, mode="circular")
    if bias is not None:
        y = y + T.broadcast_to(T.reshape(bias, (1, O, 1, 1)), y.shape)
    y = T.mean(T.relu(y), axis=(2, 3))
    return T.reshape(y, (B, G, O))


def group_conv_1x1(W, F, spec: GroupSpec, bias=None) -> Tensor:
    """Group correlation on fibers: ``F'[m, o] = sum_{j, c} W[o, c, j] F[m j, c]``.

    ``W`` is (O, C, |G|) indexed by group element ``j = m^-1 m'``; ``F`` is
    (B, |G|, C). Shifting the input fiber by ``g`` shifts the output identically.
    """
    W, F = T.as_tensor(W), T.as_tensor(F)
    B, G, C = F.shape
    O = W.shape[0]
    if W.shape != (O, C, G):
        raise ShapeError(f"group conv weight {W.shape} does not match fiber map {F.shape}")
    if G == 1:
        wmat = T.transpose(T.reshape(W, (O, C)), (1, 0))
        return linear(F, wmat, bias)
    table = cayley_table(spec)
    gathered = T.gather(F, table, axis=1)  # (B, G, G, C): [b, m, j, c] = F[b, m j, c]
    gathered = T.reshape(gathered, (B, G, G * C))
    wmat = T.reshape(T.transpose(W, (2, 1, 0)), (G * C, O))
    return linear(gathered, wmat, bias)


# ---------------------------------------------------------------------------
# plain predictors
# ---------------------------------------------------------------------------

class MLP:
    def __init__(self, params: ParameterStore, prefix: str, sizes: list[int],
                 rng: np.random.Generator, act: str = "relu"):
        self.act = activation(act)
        self.layers = []
        for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
            W = params.add(f"{prefix}{i}.W", init_uniform(rng, (a, b), a))
            bb = params.add(f"{prefix}{i}.b", init_uniform(rng, (b,), a))
            self.layers.append((W, bb))

    def __call__(self, x) -> Tensor:
        x = T.as_tensor(x)
        for i, (W, b) in enumerate(self.layers):
            if x.shape[-1] != W.shape[0]:
                raise ShapeError(f"MLP layer {i}: input {x.shape} vs weight {W.shape}")
            x = linear(x, W, b)
            if i < len(self.layers) - 1:
                x = self.act(x)
        return x


@dataclass
class ConvSpec:
    channels: int
    kernel: int
    stride: int = 1

    @property
    def padding(self) -> int:
        return self.kernel // 2


# Appendix-style 7-layer layout (channels, kernel, stride); BN/dropout omitted.
PAPER_CNN_LAYOUT = [ConvSpec(32, 3), ConvSpec(32, 3), ConvSpec(32, 3), ConvSpec(64, 5, 2),
                    ConvSpec(64, 3), ConvSpec(64, 3), ConvSpec(128, 5, 2)]
DESK_CNN_LAYOUT = [ConvSpec(8, 5, 2), ConvSpec(16, 3, 2)]


def conv_output_size(size: int, layout: list[ConvSpec]) -> int:
    for c in layout:
        size = (size + 2 * c.padding - c.kernel) // c.stride + 1
    return size


class CNN:
    """Conv stack followed by either a flatten+MLP head or global average pooling.

    ``pool="global"`` with stride-1 layers and circular padding gives logits that
    are invariant to circular shifts of the input.
    """

    def __init__(self, params: ParameterStore, prefix: str, in_channels: int, image_size: int,
                 layout: list[ConvSpec], hidden: int, n_classes: int, rng: np.random.Generator,
                 pool: str = "flatten", padding_mode: str = "zeros"):
        self.layout = layout
        self.pool = pool
        self.padding_mode = padding_mode
        self.convs = []
        c = in_channels
        for i, spec in enumerate(layout):
            fan = c * spec.kernel ** 2
            W = params.add(f"{prefix}conv{i}.W", init_uniform(rng, (spec.channels, c, spec.kernel, spec.kernel), fan))
            b = params.add(f"{prefix}conv{i}.b", init_uniform(rng, (spec.channels,), fan))
            self.convs.append((W, b, spec))
            c = spec.channels
        self.out_size = conv_output_size(image_size, layout)
        feat = c if pool == "global" else c * self.out_size ** 2
        sizes = [feat, hidden, n_classes] if hidden else [feat, n_classes]
        self.head = MLP(params, f"{prefix}head.", sizes, rng)

    def __call__(self, x) -> Tensor:
        x = T.as_tensor(x)
        for W, b, spec in self.convs:
            x = T.conv2d(x, W, stride=spec.stride, padding=spec.padding, mode=self.padding_mode)
            x = x + T.broadcast_to(T.reshape(b, (1, -1, 1, 1)), x.shape)
            x = T.relu(x)
        if self.pool == "global":
            x = T.mean(x, axis=(2, 3))
        else:
            x = T.reshape(x, (x.shape[0], -1))
        return self.head(x)


class DeepSets:
    """Per-point MLP, mean pooling, then an MLP on the pooled code."""

    def __init__(self, params: ParameterStore, prefix: str, in_dim: int, hidden: int,
                 out_dim: int, rng: np.random.Generator):
        self.phi = MLP(params, f"{prefix}phi.", [in_dim, hidden, hidden], rng)
        self.rho = MLP(params, f"{prefix}rho.", [hidden, hidden, out_dim], rng)

    def __call__(self, x) -> Tensor:
        x = T.as_tensor(x)
        h = T.relu(self.phi(x))
        return self.rho(T.mean(h, axis=-2))


class GNN:
    """Message passing on the fully connected particle graph.

    Node input: canonical position, canonical velocity, charge. Edge input:
    charge product and squared distance. Output: per-node 3-vectors added to the
    input positions.
    """

    def __init__(self, params: ParameterStore, prefix: str, hidden: int, n_layers: int,
                 rng: np.random.Generator, d: int = 3, act: str = "silu"):
        self.d = d
        self.hidden = hidden
        self.embed = MLP(params, f"{prefix}embed.", [2 * d + 1, hidden], rng)
        self.edge_mlps = []
        self.node_mlps = []
        for i in range(n_layers):
            self.edge_mlps.append(MLP(params, f"{prefix}edge{i}.", [2 * hidden + 2, hidden, hidden], rng, act))
            self.node_mlps.append(MLP(params, f"{prefix}node{i}.", [2 * hidden, hidden, hidden], rng, act))
        self.decode = MLP(params, f"{prefix}decode.", [hidden, hidden, d], rng, act)
        self.act = activation(act)

    @staticmethod
    def edges(n: int) -> tuple[np.ndarray, np.ndarray]:
        src, dst = [], []
        for i in range(n):
            for j in range(n):
                if i != j:
                    src.append(i)
                    dst.append(j)
        return np.array(src, dtype=np.intp), np.array(dst, dtype=np.intp)

    def __call__(self, X, V, q) -> Tensor:
        X, V, q = T.as_tensor(X), T.as_tensor(V), T.as_tensor(q)
        B, N, d = X.shape
        h = self.embed(T.concat([X, V, T.reshape(q, (B, N, 1))], axis=-1))
        if N > 1:
            src, dst = self.edges(N)
            qq = (q.data[:, src] * q.data[:, dst])[..., None]
            diff = T.gather(X, src, axis=1) - T.gather(X, dst, axis=1)
            d2 = T.reshape(T.tsum(T.square(diff), axis=-1), (B, len(src), 1))
            eattr = T.concat([Tensor(qq), d2], axis=-1)
        for emlp, nmlp in zip(self.edge_mlps, self.node_mlps):
            if N > 1:
                hi = T.gather(h, src, axis=1)
                hj = T.gather(h, dst, axis=1)
                m = self.act(emlp(T.concat([hi, hj, eattr], axis=-1)))
                agg = T.tsum(T.reshape(m, (B, N, N - 1, self.hidden)), axis=2)
            else:
                agg = Tensor(np.zeros((B, N, self.hidden)))
            h = h + nmlp(T.concat([h, agg], axis=-1))
        return X + self.decode(h)
