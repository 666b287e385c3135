"""Small tape-based reverse-mode autodiff over float64 numpy arrays.

Every network in the package is built from the primitives below. Elementwise
binary ops only accept equal shapes or a 0-d scalar operand; anything else must
go through :func:`broadcast_to` explicitly so shape bugs surface immediately.
"""
from __future__ import annotations

import threading
from collections import OrderedDict
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

DIVISOR_EPS = 1e-12


class ShapeError(ValueError):
    pass


class NearZeroDivisor(ZeroDivisionError):
    pass


class NonScalarLoss(ValueError):
    pass


_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr if arr.flags.c_contiguous else np.array(arr, order="C")
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple = ()
        self._backward: Callable | None = None
        self.name = name

    # ---- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return self.shape[0]

    # ---- operator sugar ---------------------------------------------------
    def __add__(self, o):
        return add(self, o)

    def __radd__(self, o):
        return add(o, self)

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    def __rmul__(self, o):
        return mul(o, self)

    def __truediv__(self, o):
        return div(self, o)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, o):
        return matmul(self, o)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def backward(self) -> None:
        run_backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor(data)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------

def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def run_backward(loss: Tensor, seed: np.ndarray | None = None) -> None:
    """Propagate gradients from ``loss`` into the ``grad`` of every leaf.

    Leaf gradients accumulate across calls; clear them with
    :meth:`ParameterStore.zero_grad` (or ``Tensor.zero_grad``).
    """
    if seed is None:
        if loss.data.shape != ():
            raise NonScalarLoss(f"backward needs a scalar loss, got shape {loss.shape}")
        seed = np.ones(())
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(loss): np.asarray(seed, dtype=np.float64)}
    for node in reversed(_toposort(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        pgrads = node._backward(g)
        for p, pg in zip(node._parents, pgrads):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


def backward(loss: Tensor, params: "ParameterStore") -> "OrderedDict[str, np.ndarray]":
    """Run the backward pass and return ``{name: grad}`` for every parameter.

    Parameters that do not influence ``loss`` get a zero gradient.
    """
    run_backward(loss)
    out = OrderedDict()
    for name, p in params.items():
        out[name] = p.grad.copy() if p.grad is not None else np.zeros_like(p.data)
    return out


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def _binary_operands(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def _reduce_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape == ():
        return np.asarray(g.sum())
    # matmul-style leading-dim broadcasting
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, (gs, s) in enumerate(zip(g.shape, shape)):
        if s == 1 and gs != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = _binary_operands(a, b)

    def bw(g):
        return _reduce_to(g, a.shape), _reduce_to(g, b.shape)

    return _result(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = _binary_operands(a, b)

    def bw(g):
        return _reduce_to(g, a.shape), _reduce_to(-g, b.shape)

    return _result(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _binary_operands(a, b)

    def bw(g):
        return _reduce_to(g * b.data, a.shape), _reduce_to(g * a.data, b.shape)

    return _result(a.data * b.data, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    if np.any(np.abs(b.data) < DIVISOR_EPS):
        raise NearZeroDivisor(
            f"divisor below {DIVISOR_EPS:g} (min |b| = {np.min(np.abs(b.data)):.3e})"
        )
    out = a.data / b.data

    def bw(g):
        return _reduce_to(g / b.data, a.shape), _reduce_to(-g * out / b.data, b.shape)

    return _result(out, (a, b), bw)


def scale(a, s: float) -> Tensor:
    a = as_tensor(a)
    s = float(s)
    return _result(a.data * s, (a,), lambda g: (g * s,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _result(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _result(out, (a,), lambda g: (g * (1.0 - out * out),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return _result(np.log(a.data), (a,), lambda g: (g / a.data,))


def sin(a) -> Tensor:
    a = as_tensor(a)
    return _result(np.sin(a.data), (a,), lambda g: (g * np.cos(a.data),))


def cos(a) -> Tensor:
    a = as_tensor(a)
    return _result(np.cos(a.data), (a,), lambda g: (-g * np.sin(a.data),))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _result(out, (a,), lambda g: (g * out * (1.0 - out),))


def silu(a) -> Tensor:
    a = as_tensor(a)
    s = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    out = a.data * s
    return _result(out, (a,), lambda g: (g * (s + a.data * s * (1.0 - s)),))


def square(a) -> Tensor:
    a = as_tensor(a)
    return _result(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


# ---------------------------------------------------------------------------
# reductions / softmax
# ---------------------------------------------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(ax % ndim for ax in axis))


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(out, (a,), bw)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    return scale(tsum(a, axes, keepdims), 1.0 / count)


def softmax(a) -> Tensor:
    """Softmax over the last axis."""
    a = as_tensor(a)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _result(out, (a,), bw)


def log_softmax(a) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def bw(g):
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return _result(out, (a,), bw)


def dot(a, b) -> Tensor:
    """Batched dot product over the last axis."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}")
    out = np.einsum("...i,...i->...", a.data, b.data)

    def bw(g):
        g = g[..., None]
        return g * b.data, g * a.data

    return _result(out, (a, b), bw)


def norm(a) -> Tensor:
    """Euclidean norm over the last axis. Gradient is zero where the norm is zero."""
    a = as_tensor(a)
    out = np.sqrt(np.einsum("...i,...i->...", a.data, a.data))

    def bw(g):
        safe = np.where(out > 0, out, 1.0)
        return (np.where(out[..., None] > 0, a.data * (g / safe)[..., None], 0.0),)

    return _result(out, (a,), bw)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands: {a.shape} vs {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} vs {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(f"matmul shape mismatch: {a.shape} vs {b.shape}") from exc

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _reduce_to(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            if b.ndim == 2 and a.ndim > 2:
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _reduce_to(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _result(out, (a, b), bw)


def sparse_apply(a, op) -> Tensor:
    """``a[..., K] -> a @ op.T`` for a fixed scipy.sparse ``op`` of shape (N, K)."""
    a = as_tensor(a)
    if a.shape[-1] != op.shape[1]:
        raise ShapeError(f"sparse operator {op.shape} cannot act on {a.shape}")
    lead = a.shape[:-1]
    flat = a.data.reshape(-1, a.shape[-1])
    out = np.asarray((op @ flat.T).T).reshape(lead + (op.shape[0],))

    def bw(g):
        gf = g.reshape(-1, op.shape[0])
        return (np.asarray((op.T @ gf.T).T).reshape(a.shape),)

    return _result(out, (a,), bw)


# ---------------------------------------------------------------------------
# shape manipulation
# ---------------------------------------------------------------------------

def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    shape = tuple(shape)
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {a.shape} to {shape}") from exc
    return _result(out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _result(np.ascontiguousarray(a.data.transpose(axes)), (a,),
                   lambda g: (g.transpose(inv),))


def swapaxes(a, i, j) -> Tensor:
    a = as_tensor(a)
    axes = list(range(a.ndim))
    axes[i], axes[j] = axes[j], axes[i]
    return transpose(a, axes)


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    shape = tuple(shape)
    try:
        out = np.broadcast_to(a.data, shape).copy()
    except ValueError as exc:
        raise ShapeError(f"cannot broadcast {a.shape} to {shape}") from exc
    pad = len(shape) - a.ndim
    padded = (1,) * pad + a.shape

    def bw(g):
        axes = tuple(i for i, (s, t) in enumerate(zip(padded, shape)) if s == 1 and t != 1)
        g = g.sum(axis=axes, keepdims=True) if axes else g
        return (g.reshape(a.shape),)

    return _result(out, (a,), bw)


def expand_to(a, shape) -> Tensor:
    """Append singleton axes to ``a`` and broadcast it to ``shape``."""
    a = as_tensor(a)
    shape = tuple(shape)
    extra = len(shape) - a.ndim
    return broadcast_to(reshape(a, a.shape + (1,) * extra), shape)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise ShapeError("concat shape mismatch: " + ", ".join(str(t.shape) for t in ts)) from exc
    sizes = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def bw(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _result(out, ts, bw)


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    ax = axis if axis >= 0 else axis + ts[0].ndim + 1
    return concat([reshape(t, t.shape[:ax] + (1,) + t.shape[ax:]) for t in ts], axis=ax)


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)
    out = a.data[idx]

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return _result(np.array(out, copy=True), (a,), bw)


def gather(a, index, axis: int = 0) -> Tensor:
    """``np.take`` along ``axis`` with an integer index array."""
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.intp)
    out = np.take(a.data, index, axis=axis)
    ax = axis % a.ndim

    def bw(g):
        full = np.zeros_like(a.data)
        moved = np.moveaxis(full, ax, 0)
        gm = np.moveaxis(g, list(range(ax, ax + index.ndim)), list(range(index.ndim)))
        np.add.at(moved, index, gm)
        return (full,)

    return _result(out, (a,), bw)


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def _pad(x: np.ndarray, p: int, mode: str) -> np.ndarray:
    if p == 0:
        return x
    if mode == "circular":
        return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)), mode="wrap")
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def _unpad(g: np.ndarray, p: int, mode: str, H: int, W: int) -> np.ndarray:
    if p == 0:
        return g
    if mode != "circular":
        return g[:, :, p:p + H, p:p + W]
    rows = np.arange(-p, H + p) % H
    cols = np.arange(-p, W + p) % W
    gh = np.zeros(g.shape[:2] + (H, g.shape[3]))
    np.add.at(gh, (slice(None), slice(None), rows), g)
    gw = np.zeros(g.shape[:2] + (H, W))
    np.add.at(gw, (slice(None), slice(None), slice(None), cols), gh)
    return gw


def conv2d(x, w, stride: int = 1, padding: int = 0, mode: str = "zeros") -> Tensor:
    """Cross-correlation of ``x`` (B, C, H, W) with ``w`` (O, C, kh, kw)."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d shape mismatch: {x.shape} vs {w.shape}")
    B, C, H, W = x.shape
    O, _, kh, kw = w.shape
    xp = _pad(x.data, padding, mode)
    Hp, Wp = xp.shape[2:]
    Ho = (Hp - kh) // stride + 1
    Wo = (Wp - kw) // stride + 1
    if Ho <= 0 or Wo <= 0:
        raise ShapeError(f"conv2d kernel {w.shape} larger than padded input {xp.shape}")
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, : (Ho - 1) * stride + 1: stride, : (Wo - 1) * stride + 1: stride]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(B * Ho * Wo, C * kh * kw)
    wmat = w.data.reshape(O, -1)
    out = (cols @ wmat.T).reshape(B, Ho, Wo, O).transpose(0, 3, 1, 2)

    def bw(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(B * Ho * Wo, O)
        gw = (g2.T @ cols).reshape(w.shape) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            gc = (g2 @ wmat).reshape(B, Ho, Wo, C, kh, kw)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += (
                        gc[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                    )
            gx = _unpad(gxp, padding, mode, H, W)
        return gx, gw

    return _result(np.ascontiguousarray(out), (x, w), bw)


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

class ParameterStore:
    """Insertion-ordered named parameters."""

    def __init__(self):
        self._params: "OrderedDict[str, Tensor]" = OrderedDict()

    def add(self, name: str, value) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(value, dtype=np.float64, copy=True), requires_grad=True, name=name)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def __iter__(self):
        return iter(self._params)

    def items(self):
        return self._params.items()

    def names(self) -> list[str]:
        return list(self._params)

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.grad = None

    def state(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, v.data.copy()) for k, v in self._params.items())

    def load_state(self, state: dict, strict: bool = True) -> None:
        for name, p in self._params.items():
            if name not in state:
                if strict:
                    raise KeyError(f"missing parameter {name!r} in state")
                continue
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise ShapeError(f"parameter {name!r}: expected {p.shape}, got {arr.shape}")
            p.data = arr.copy()
        if strict:
            extra = set(state) - set(self._params)
            if extra:
                raise KeyError(f"unexpected parameters in state: {sorted(extra)}")

    def subset(self, prefix: str) -> "ParameterStore":
        sub = ParameterStore()
        for k, v in self._params.items():
            if k.startswith(prefix):
                sub._params[k] = v
        return sub

    def merge(self, other: "ParameterStore") -> None:
        for k, v in other.items():
            if k in self._params:
                raise KeyError(f"duplicate parameter name {k!r}")
            self._params[k] = v

    def num_params(self) -> int:
        return int(sum(p.size for p in self._params.values()))


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

class FiniteDiffResult:
    def __init__(self, max_rel_error: float, kinks: list[int], rel_errors: np.ndarray):
        self.max_rel_error = max_rel_error
        self.kinks = kinks
        self.rel_errors = rel_errors

    def __float__(self):
        return self.max_rel_error

    def __repr__(self):
        return f"FiniteDiffResult(max_rel_error={self.max_rel_error:.3e}, kinks={self.kinks})"


def finite_diff_check(fn: Callable[[Tensor], Tensor], point, step: float = 1e-6,
                      kink_tol: float = 1e-4) -> FiniteDiffResult:
    """Compare autodiff gradients of scalar ``fn`` with central differences.

    Coordinates where the one-sided differences disagree by more than
    ``kink_tol`` (relative) straddle a nondifferentiable point; they are listed
    in ``kinks`` and left out of ``max_rel_error``.
    """
    if not 0 < step <= 1e-3:
        raise ValueError("step must lie in (0, 1e-3]")
    x0 = np.array(point.data if isinstance(point, Tensor) else point, dtype=np.float64)
    x = Tensor(x0.copy(), requires_grad=True)
    y = fn(x)
    run_backward(y)
    ad = x.grad.reshape(-1) if x.grad is not None else np.zeros(x0.size)
    f0 = float(y.data)

    def f_at(v):
        with no_grad():
            return float(fn(Tensor(v)).data)

    flat = x0.reshape(-1)
    rel = np.zeros(flat.size)
    kinks = []
    for i in range(flat.size):
        vp = flat.copy(); vp[i] += step
        vm = flat.copy(); vm[i] -= step
        fp = f_at(vp.reshape(x0.shape))
        fm = f_at(vm.reshape(x0.shape))
        cd = (fp - fm) / (2 * step)
        fwd = (fp - f0) / step
        bwd = (f0 - fm) / step
        if abs(fwd - bwd) > kink_tol * (1.0 + abs(cd)):
            kinks.append(i)
            continue
        rel[i] = abs(ad[i] - cd) / (abs(cd) + 1e-8)
    mask = np.ones(flat.size, bool)
    mask[kinks] = False
    max_rel = float(rel[mask].max()) if mask.any() else 0.0
    return FiniteDiffResult(max_rel, kinks, rel)


# ---------------------------------------------------------------------------
# CANON1 checkpoint container
# ---------------------------------------------------------------------------

MAGIC = b"CANON1\n"


class CheckpointError(ValueError):
    pass


def save_tensors(path, tensors: "dict[str, np.ndarray] | Iterable[tuple[str, np.ndarray]]") -> None:
    items = list(tensors.items()) if isinstance(tensors, dict) else list(tensors)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(f"{len(items)}\n".encode("ascii"))
        for name, arr in items:
            if "\n" in name:
                raise CheckpointError(f"tensor name contains newline: {name!r}")
            arr = np.asarray(arr, dtype="<f8").copy(order="C")
            fh.write(name.encode("utf-8") + b"\n")
            fh.write((" ".join(str(s) for s in arr.shape) + "\n").encode("ascii"))
            fh.write(arr.tobytes(order="C"))


def load_tensors(path) -> "OrderedDict[str, np.ndarray]":
    with open(path, "rb") as fh:
        buf = fh.read()
    if not buf.startswith(MAGIC):
        raise CheckpointError(f"{path}: bad magic {buf[:7]!r}, expected {MAGIC!r}")
    pos = len(MAGIC)

    def line():
        nonlocal pos
        end = buf.find(b"\n", pos)
        if end < 0:
            raise CheckpointError(f"{path}: truncated header at byte {pos}")
        s = buf[pos:end].decode("utf-8")
        pos = end + 1
        return s

    head = line()
    try:
        count = int(head)
    except ValueError:
        raise CheckpointError(f"{path}: bad tensor count {head!r} at byte {len(MAGIC)}") from None
    out: "OrderedDict[str, np.ndarray]" = OrderedDict()
    for _ in range(count):
        name = line()
        shape_line = line().strip()
        shape = tuple(int(s) for s in shape_line.split()) if shape_line else ()
        nbytes = 8 * int(np.prod(shape, dtype=np.int64))
        if pos + nbytes > len(buf):
            raise CheckpointError(
                f"{path}: tensor {name!r} needs {nbytes} bytes at offset {pos}, file has {len(buf)}"
            )
        out[name] = np.frombuffer(buf, dtype="<f8", count=nbytes // 8, offset=pos).reshape(shape).astype(np.float64)
        pos += nbytes
    return out
