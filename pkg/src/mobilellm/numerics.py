"""Dense tensors with tape-based reverse-mode differentiation.

Every tensor op records a closure that maps the output gradient to input
gradients. ``DiffTensor.backward`` walks the graph in reverse topological
order and accumulates gradients into leaves that ask for them.

Broadcasting is deliberately narrow: elementwise binary ops need equal
shapes, and ``matmul`` only broadcasts a 2-D right operand across the
leading batch dimensions of the left one.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

RMSNORM_EPS = 1e-5
ROPE_BASE = 10000.0

_DTYPES = {"float32": np.float32, "float64": np.float64}


class ShapeError(ValueError):
    """Operand extents are incompatible."""


def resolve_dtype(dtype) -> np.dtype:
    if isinstance(dtype, str):
        if dtype not in _DTYPES:
            raise ValueError(f"unsupported precision {dtype!r}; use one of {sorted(_DTYPES)}")
        dtype = _DTYPES[dtype]
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported precision {dtype}")
    return dtype


class DiffTensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_done", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if dtype is None:
            arr = np.asarray(data)
            if arr.dtype not in (np.float32, np.float64):
                arr = arr.astype(np.float32)
        else:
            arr = np.asarray(data, dtype=resolve_dtype(dtype))
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[DiffTensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._done = False
        self.name = name

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"DiffTensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # -- graph ---------------------------------------------------------
    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "DiffTensor":
        return DiffTensor(self.data, dtype=self.dtype)

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into every leaf with ``requires_grad``.

        A graph may be differentiated once; build a fresh forward pass to
        differentiate again.
        """
        if self._done:
            raise RuntimeError("backward already called on this graph; recompute the forward pass")
        if grad is None:
            if self.size != 1:
                raise ShapeError(f"backward without a seed gradient needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=self.dtype)
            if grad.shape != self.shape:
                raise ShapeError(f"seed gradient shape {grad.shape} != tensor shape {self.shape}")

        order: list[DiffTensor] = []
        seen: set[int] = set()
        stack: list[tuple[DiffTensor, bool]] = [(self, False)]
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

        grads: dict[int, np.ndarray] = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                prev = grads.get(id(parent))
                grads[id(parent)] = pg if prev is None else prev + pg
        self._done = True

    # -- operator sugar ------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def tensor(data, requires_grad: bool = False, dtype="float32", name: str | None = None) -> DiffTensor:
    return DiffTensor(data, requires_grad=requires_grad, dtype=dtype, name=name)


def _as_tensor(x, like: DiffTensor) -> DiffTensor:
    return x if isinstance(x, DiffTensor) else DiffTensor(x, dtype=like.dtype)


def _make(data: np.ndarray, parents: Iterable[DiffTensor], backward) -> DiffTensor:
    parents = tuple(parents)
    out = DiffTensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _same_shape(a: DiffTensor, b: DiffTensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ (explicit reshape required)")


# -- elementwise ---------------------------------------------------------

def add(a: DiffTensor, b) -> DiffTensor:
    b = _as_tensor(b, a)
    _same_shape(a, b, "add")
    return _make(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: DiffTensor, b) -> DiffTensor:
    b = _as_tensor(b, a)
    _same_shape(a, b, "sub")
    return _make(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: DiffTensor, b) -> DiffTensor:
    if not isinstance(b, DiffTensor):
        return scale(a, float(b))
    _same_shape(a, b, "mul")
    return _make(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def scale(a: DiffTensor, c: float) -> DiffTensor:
    c = a.dtype.type(c)
    return _make(a.data * c, (a,), lambda g: (g * c,))


def add_constant(a: DiffTensor, const: np.ndarray) -> DiffTensor:
    """``a + const`` where ``const`` is a non-differentiable array.

    ``const`` may broadcast against ``a`` (used for additive attention masks);
    the result always has ``a``'s shape.
    """
    const = np.asarray(const, dtype=a.dtype)
    out = a.data + const
    if out.shape != a.shape:
        raise ShapeError(f"add_constant: constant {const.shape} would reshape operand {a.shape}")
    return _make(out, (a,), lambda g: (g,))


def silu(x: DiffTensor) -> DiffTensor:
    sig = 1.0 / (1.0 + np.exp(-x.data))
    out = x.data * sig

    def backward(g):
        return (g * (sig * (1.0 + x.data * (1.0 - sig))),)

    return _make(out, (x,), backward)


def exp(x: DiffTensor) -> DiffTensor:
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,))


# -- reductions ----------------------------------------------------------

def sum_all(x: DiffTensor) -> DiffTensor:
    return _make(np.asarray(x.data.sum(), dtype=x.dtype), (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),))


def mean_all(x: DiffTensor) -> DiffTensor:
    n = x.size
    return scale(sum_all(x), 1.0 / n)


# -- shape ---------------------------------------------------------------

def reshape(x: DiffTensor, shape: Sequence[int]) -> DiffTensor:
    out = x.data.reshape(shape)
    return _make(out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: DiffTensor, axes: Sequence[int]) -> DiffTensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def concat(xs: Sequence[DiffTensor], axis: int) -> DiffTensor:
    datas = [t.data for t in xs]
    out = np.concatenate(datas, axis=axis)
    bounds = np.cumsum([d.shape[axis] for d in datas])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(out, xs, backward)


def repeat(x: DiffTensor, n: int, axis: int) -> DiffTensor:
    """Repeat each slice along ``axis`` ``n`` times consecutively (interleaved)."""
    axis = axis % x.ndim
    out = np.repeat(x.data, n, axis=axis)

    def backward(g):
        shape = x.shape[:axis] + (x.shape[axis], n) + x.shape[axis + 1:]
        return (g.reshape(shape).sum(axis=axis + 1),)

    return _make(out, (x,), backward)


def embedding(weight: DiffTensor, ids: np.ndarray) -> DiffTensor:
    ids = np.asarray(ids)
    if ids.dtype.kind not in "iu":
        raise TypeError(f"token ids must be integers, got {ids.dtype}")
    vocab = weight.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        raise IndexError(f"token id out of range [0, {vocab})")
    out = weight.data[ids]

    def backward(g):
        gw = np.zeros_like(weight.data)
        np.add.at(gw, ids.reshape(-1), g.reshape(-1, weight.shape[1]))
        return (gw,)

    return _make(out, (weight,), backward)


# -- linear algebra ------------------------------------------------------

def matmul(a: DiffTensor, b: DiffTensor) -> DiffTensor:
    """Matrix product over the last two axes.

    ``a`` is ``[..., m, k]``; ``b`` is either ``[k, n]`` (shared across the
    batch) or ``[..., k, n]`` with identical leading extents.
    """
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner extents differ for shapes {a.shape} and {b.shape}")
    if b.ndim != 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch extents differ for shapes {a.shape} and {b.shape}")
    out = np.matmul(a.data, b.data)

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        if b.ndim == 2:
            a2 = a.data.reshape(-1, a.shape[-1])
            gb = a2.T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return ga, gb

    return _make(out, (a, b), backward)


def linear(x: DiffTensor, weight: DiffTensor) -> DiffTensor:
    """``x @ weight.T`` for a ``[out, in]`` weight, without a transpose node."""
    if x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    out = x.data @ weight.data.T

    def backward(g):
        gx = g @ weight.data
        gw = g.reshape(-1, g.shape[-1]).T @ x.data.reshape(-1, x.shape[-1])
        return gx, gw

    return _make(out, (x, weight), backward)


# -- normalisers and losses ---------------------------------------------

def softmax(x: DiffTensor, axis: int = -1) -> DiffTensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y, (x,), backward)


def log_softmax(x: DiffTensor, axis: int = -1) -> DiffTensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _make(out, (x,), backward)


def rmsnorm(x: DiffTensor, scale_: DiffTensor, eps: float = RMSNORM_EPS) -> DiffTensor:
    d = x.shape[-1]
    if scale_.shape != (d,):
        raise ShapeError(f"rmsnorm: scale shape {scale_.shape} does not match last extent {d}")
    r = 1.0 / np.sqrt((x.data * x.data).mean(axis=-1, keepdims=True) + eps)
    normed = x.data * r
    out = normed * scale_.data

    def backward(g):
        u = g * scale_.data
        gx = r * u - x.data * (r ** 3) * (u * x.data).sum(axis=-1, keepdims=True) / d
        gs = (g * normed).reshape(-1, d).sum(axis=0)
        return gx, gs

    return _make(out, (x, scale_), backward)


def cross_entropy(logits: DiffTensor, targets: np.ndarray) -> DiffTensor:
    """Mean negative log-probability of ``targets`` under ``softmax(logits)``.

    ``logits`` is ``[N, V]`` and ``targets`` holds ``N`` integer class ids.
    """
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy expects [N, V] logits, got {logits.shape}")
    targets = np.asarray(targets).reshape(-1)
    n, v = logits.shape
    if targets.shape[0] != n:
        raise ShapeError(f"cross_entropy: {n} rows but {targets.shape[0]} targets")
    if targets.size and (targets.min() < 0 or targets.max() >= v):
        raise IndexError(f"target id out of range [0, {v})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    rows = np.arange(n)
    loss = -logp[rows, targets].mean()

    def backward(g):
        p = np.exp(logp)
        p[rows, targets] -= 1.0
        return (p * (g / n),)

    return _make(np.asarray(loss, dtype=logits.dtype), (logits,), backward)


# -- rotary positions ----------------------------------------------------

def rope_angles(positions: np.ndarray, dim: int, base: float = ROPE_BASE) -> np.ndarray:
    """Rotation angles ``[T, dim/2]``; pair i turns at ``base**(-2i/dim)``."""
    inv_freq = base ** (-np.arange(0, dim, 2, dtype=np.float64) / dim)
    return np.outer(np.asarray(positions, dtype=np.float64), inv_freq)


def rope(x: DiffTensor, positions: np.ndarray, base: float = ROPE_BASE) -> DiffTensor:
    """Rotate adjacent feature pairs ``(2i, 2i+1)`` by position-dependent angles.

    ``x`` is ``[..., T, d]`` and ``positions`` holds ``T`` integer positions.
    """
    d = x.shape[-1]
    if d % 2:
        raise ShapeError(f"rope needs an even last extent, got {d}")
    positions = np.asarray(positions)
    if positions.shape != (x.shape[-2],):
        raise ShapeError(f"rope: {positions.shape[0] if positions.ndim else 0} positions for sequence extent {x.shape[-2]}")
    ang = rope_angles(positions, d, base)
    cos = np.cos(ang).astype(x.dtype)
    sin = np.sin(ang).astype(x.dtype)
    x0 = x.data[..., 0::2]
    x1 = x.data[..., 1::2]
    out = np.empty_like(x.data)
    out[..., 0::2] = x0 * cos - x1 * sin
    out[..., 1::2] = x0 * sin + x1 * cos

    def backward(g):
        g0 = g[..., 0::2]
        g1 = g[..., 1::2]
        gx = np.empty_like(g)
        gx[..., 0::2] = g0 * cos + g1 * sin
        gx[..., 1::2] = -g0 * sin + g1 * cos
        return (gx,)

    return _make(out, (x,), backward)


# -- checking utilities --------------------------------------------------

def numerical_grad(f: Callable[[], float], arr: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar ``f()`` w.r.t. ``arr`` (mutated in place, restored)."""
    grad = np.zeros_like(arr, dtype=np.float64)
    flat = arr.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = f()
        flat[i] = orig - step
        lo = f()
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * step)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> np.ndarray:
    """Elementwise ``|a - n| / max(|a|, |n|, floor)``."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return np.abs(a - n) / denom


def global_norm(arrays: Iterable[np.ndarray]) -> float:
    return math.sqrt(sum(float(np.vdot(a, a)) for a in arrays))
