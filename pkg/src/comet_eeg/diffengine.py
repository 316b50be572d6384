"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every trainable computation in the package is expressed with the ops below.
A tape node is recorded only when at least one input requires a gradient, so
forward passes over constant tensors (momentum encoder, finite-difference
probes, frozen feature extraction) carry no bookkeeping.

Broadcasting is limited to leading-batch expansion: in a binary op one
operand's shape must equal the other's or be a suffix of it.
"""
from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)
LAYERNORM_EPS = 1e-5


class ShapeError(ValueError):
    """Raised when operand shapes violate an op's shape rule."""

    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = shapes
        joined = ", ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {joined}")


class Tensor:
    """Immutable float64 array plus the tape edge that produced it."""

    __slots__ = ("data", "requires_grad", "_parents", "_backward", "op", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, *, _parents=(), _backward=None, op: str = "leaf"):
        arr = np.array(data, dtype=np.float64) if op == "leaf" else data
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        self.op = op

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)

    @property
    def T(self):
        return transpose(self)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    data = np.asarray(data, dtype=np.float64)
    if any(p.requires_grad for p in parents):
        return Tensor(data, True, _parents=tuple(parents), _backward=backward, op=op)
    return Tensor(data, False, op=op)


# ---------------------------------------------------------------------------
# elementwise binary ops with leading-batch expansion

def _check_suffix(op: str, a: tuple, b: tuple) -> None:
    if a == b:
        return
    short, long_ = (a, b) if len(a) <= len(b) else (b, a)
    if len(short) == 0 or long_[len(long_) - len(short):] == short:
        return
    raise ShapeError(op, a, b)


def _unexpand(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead))) if lead else g


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_suffix("add", a.shape, b.shape)

    def backward(g):
        return _unexpand(g, a.shape), _unexpand(g, b.shape)

    return _node(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_suffix("sub", a.shape, b.shape)

    def backward(g):
        return _unexpand(g, a.shape), _unexpand(-g, b.shape)

    return _node(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_suffix("mul", a.shape, b.shape)

    def backward(g):
        return _unexpand(g * b.data, a.shape), _unexpand(g * a.data, b.shape)

    return _node(a.data * b.data, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_suffix("div", a.shape, b.shape)
    out = a.data / b.data

    def backward(g):
        return _unexpand(g / b.data, a.shape), _unexpand(-g * out / b.data, b.shape)

    return _node(out, (a, b), backward, "div")


def neg(a: Tensor) -> Tensor:
    return _node(-a.data, (a,), lambda g: (-g,), "neg")


# ---------------------------------------------------------------------------
# unary elementwise

def square(a: Tensor) -> Tensor:
    return _node(a.data * a.data, (a,), lambda g: (2.0 * a.data * g,), "square")


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _node(out, (a,), lambda g: (0.5 * g / out,), "sqrt")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    return _node(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def abs_(a: Tensor) -> Tensor:
    # right derivative at the kink, so a finite-difference probe at 0 flags it
    slope = np.where(a.data >= 0, 1.0, -1.0)
    return _node(np.abs(a.data), (a,), lambda g: (g * slope,), "abs")


def gelu(a: Tensor) -> Tensor:
    """Exact GELU, x * Phi(x)."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x / _SQRT2))

    def backward(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
        return (g * (cdf + x * pdf),)

    return _node(x * cdf, (a,), backward, "gelu")


# ---------------------------------------------------------------------------
# reductions

def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _node(out, (a,), backward, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / count)


# ---------------------------------------------------------------------------
# linear algebra

def matmul(a, b) -> Tensor:
    """Batched matrix product.

    ``a`` is (..., n, k). ``b`` is either (..., k, m) with identical leading
    dims or a plain (k, m) matrix shared across the batch.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    if b.ndim > 2 and a.ndim != b.ndim:
        raise ShapeError("matmul", a.shape, b.shape)

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            if b.ndim == 2 and a.ndim > 2:
                k, m = b.shape
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, m)
            else:
                gb = np.swapaxes(a.data, -1, -2) @ g
        return ga, gb

    return _node(a.data @ b.data, (a, b), backward, "matmul")


def conv1d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1) -> Tensor:
    """Strided 1-D convolution over the last axis, single input channel.

    ``x`` is (..., L); ``weight`` is (k, out). Returns (..., L_out, out) with
    ``L_out = (L - k) // stride + 1``.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if weight.ndim != 2 or x.ndim < 1:
        raise ShapeError("conv1d", x.shape, weight.shape)
    k, n_out_ch = weight.shape
    length = x.shape[-1]
    if k > length or stride < 1:
        raise ShapeError("conv1d", x.shape, weight.shape)
    n_out = (length - k) // stride + 1
    if stride == k:
        cols = x.data[..., : n_out * k].reshape(x.shape[:-1] + (n_out, k))
    else:
        cols = np.lib.stride_tricks.sliding_window_view(x.data, k, axis=-1)[..., ::stride, :]
    out = cols @ weight.data
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (n_out_ch,):
            raise ShapeError("conv1d", x.shape, weight.shape, bias.shape)
        out = out + bias.data
        parents.append(bias)

    def backward(g):
        gx = gw = None
        if x.requires_grad:
            gcols = g @ weight.data.T
            gx = np.zeros(x.shape)
            if stride == k:
                gx[..., : n_out * k] = gcols.reshape(x.shape[:-1] + (n_out * k,))
            else:
                stop = stride * (n_out - 1) + 1
                for kk in range(k):
                    gx[..., kk: kk + stop: stride] += gcols[..., kk]
        if weight.requires_grad:
            gw = cols.reshape(-1, k).T @ g.reshape(-1, n_out_ch)
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.reshape(-1, n_out_ch).sum(axis=0))
        return tuple(grads)

    return _node(out, parents, backward, "conv1d")


# ---------------------------------------------------------------------------
# normalisation and softmax (all over the last axis)

def softmax(a: Tensor) -> Tensor:
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _node(out, (a,), backward, "softmax")


def logsumexp(a: Tensor) -> Tensor:
    m = a.data.max(axis=-1, keepdims=True)
    s = np.exp(a.data - m).sum(axis=-1, keepdims=True)
    out = (m + np.log(s))[..., 0]

    def backward(g):
        p = np.exp(a.data - out[..., None])
        return (g[..., None] * p,)

    return _node(out, (a,), backward, "logsumexp")


def layernorm(a: Tensor, eps: float = LAYERNORM_EPS) -> Tensor:
    """Zero-mean, unit-variance normalisation over the last axis (no affine)."""
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    out = xc * inv

    def backward(g):
        gm = g.mean(axis=-1, keepdims=True)
        gxm = (g * out).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - out * gxm),)

    return _node(out, (a,), backward, "layernorm")


# ---------------------------------------------------------------------------
# structural ops

def reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape)
    return _node(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _node(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),), "transpose")


def broadcast_to(a: Tensor, shape) -> Tensor:
    """Explicit numpy-style expansion (size-1 or missing leading axes)."""
    shape = tuple(shape)
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError:
        raise ShapeError("broadcast_to", a.shape, shape) from None
    lead = len(shape) - a.ndim
    kept = tuple(i for i, n in enumerate(a.shape) if n == 1 and shape[lead + i] != 1)

    def backward(g):
        g = g.sum(axis=tuple(range(lead))) if lead else g
        if kept:
            g = g.sum(axis=kept, keepdims=True)
        return (g,)

    return _node(np.array(out), (a,), backward, "broadcast_to")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ax = axis % tensors[0].ndim
    for t in tensors[1:]:
        if t.ndim != tensors[0].ndim or t.shape[:ax] + t.shape[ax + 1:] != tensors[0].shape[:ax] + tensors[0].shape[ax + 1:]:
            raise ShapeError("concat", *(u.shape for u in tensors))
    out = np.concatenate([t.data for t in tensors], axis=ax)
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def backward(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax) for i in range(len(tensors))
        )

    return _node(out, tensors, backward, "concat")


def index(a: Tensor, key) -> Tensor:
    """Basic or advanced indexing; gradients scatter-add back to the source."""
    out = a.data[key]
    if not isinstance(out, np.ndarray):
        out = np.asarray(out)

    parts = key if isinstance(key, tuple) else (key,)
    advanced = any(isinstance(k, (np.ndarray, list)) for k in parts)

    def backward(g):
        full = np.zeros(a.shape)
        if advanced:
            np.add.at(full, key, g)
        else:
            full[key] += g
        return (full,)

    return _node(np.array(out, dtype=np.float64), (a,), backward, "index")


def take(a: Tensor, indices, axis: int = 0) -> Tensor:
    """Gather along one axis with an integer array (rows may repeat)."""
    indices = np.asarray(indices, dtype=np.intp)
    ax = axis % a.ndim
    out = np.take(a.data, indices, axis=ax)

    def backward(g):
        full = np.zeros(a.shape)
        moved = np.moveaxis(full, ax, 0)
        gm = np.moveaxis(g, tuple(range(ax, ax + indices.ndim)), tuple(range(indices.ndim)))
        np.add.at(moved, indices, gm)
        return (full,)

    return _node(out, (a,), backward, "take")


# ---------------------------------------------------------------------------
# reverse pass

def _topological(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in reversed(node._parents):
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(output: Tensor, seed=None, wrt: Iterable[Tensor] | None = None) -> dict[int, np.ndarray]:
    """Propagate ``seed`` (default ones) from ``output`` back through its tape.

    Returns a mapping ``id(leaf) -> gradient``. When ``wrt`` is given, every
    listed tensor appears in the mapping, with zeros if it has no path to the
    output.
    """
    seed = np.ones(output.shape) if seed is None else np.asarray(seed, dtype=np.float64)
    if seed.shape != output.shape:
        raise ShapeError("backward", output.shape, seed.shape)
    grads: dict[int, np.ndarray] = {}
    leaves: dict[int, np.ndarray] = {}
    if output.requires_grad:
        grads[id(output)] = seed
        for node in reversed(_topological(output)):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                leaves[id(node)] = g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
    if wrt is not None:
        for t in wrt:
            leaves.setdefault(id(t), np.zeros(t.shape))
    return leaves


def grad(output: Tensor, wrt: Sequence[Tensor], seed=None) -> list[np.ndarray]:
    table = backward(output, seed, wrt)
    return [table[id(t)] for t in wrt]


def grad_check(fn: Callable[..., Tensor], point: Sequence[np.ndarray], step: float = 1e-5,
               coords: dict[int, np.ndarray] | None = None) -> float:
    """Max relative error between reverse-mode and central-difference gradients.

    ``fn`` maps tensors (one per entry of ``point``) to a scalar tensor. The
    error per coordinate is ``|analytic - numeric| / max(1, |analytic|)``.
    ``coords`` optionally restricts the numeric probe for argument ``i`` to the
    flat indices ``coords[i]``.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    arrays = [np.array(p, dtype=np.float64) for p in point]
    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    out = fn(*leaves)
    if out.size != 1:
        raise ShapeError("grad_check: scalar output required", out.shape)
    analytic = grad(out, leaves, np.ones(out.shape))

    constants = [Tensor(a) for a in arrays]
    worst = 0.0
    for i, arr in enumerate(arrays):
        flat_idx = range(arr.size) if coords is None or i not in coords else coords[i]
        args = list(constants)
        for flat in flat_idx:
            unravel = np.unravel_index(flat, arr.shape)
            vals = []
            for sign in (1.0, -1.0):
                probe = arr.copy()
                probe[unravel] += sign * step
                args[i] = Tensor(probe)
                vals.append(fn(*args).item())
            numeric = (vals[0] - vals[1]) / (2.0 * step)
            a_val = analytic[i][unravel]
            err = abs(a_val - numeric) / max(1.0, abs(a_val))
            worst = max(worst, err)
    return worst
