"""Dense arrays with recorded operations and reverse-mode differentiation.

Every operation stamps its output with a monotonically increasing sequence
number, so the implicit graph is ordered exactly by execution.  ``backward``
walks the ancestors of a scalar loss in reverse execution order and pushes
adjoints through per-operation closures.  Gradients accumulate on leaves
(tensors created directly rather than by an operation) that were built with
``requires_grad=True``; repeated backward calls keep adding until the
accumulator is cleared.

Arrays are float32 or float64; anything else passed to the constructor is
promoted to float64.  Broadcasting in elementwise operations follows numpy's
trailing-axis rule (an extent of 1 stretches), and adjoints are summed back
to the operand shapes.
"""
from __future__ import annotations

import itertools
from typing import Callable, Iterable, Optional, Sequence, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

_SEQ = itertools.count()
_GRAD_ENABLED = True

Scalar = Union[int, float]
BackwardFn = Callable[[np.ndarray], tuple]


def _as_array(data) -> np.ndarray:
    arr = np.asarray(data)
    if arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(np.float64)
    return arr


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn", "_seq")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_array(data)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward_fn: Optional[BackwardFn] = None
        self._seq = next(_SEQ)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self) -> None:
        backward(self)

    def zero_grad(self) -> None:
        self.grad = None

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return reduce(self, axis=axis, kind="sum", keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return reduce(self, axis=axis, kind="mean", keepdims=keepdims)

    def reshape(self, shape) -> "Tensor":
        return reshape(self, shape)

    @property
    def T(self) -> "Tensor":
        return transpose2d(self)

    def __add__(self, other):
        return add(self, _lift(other, self))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _lift(other, self))

    def __rsub__(self, other):
        return sub(_lift(other, self), self)

    def __mul__(self, other):
        return mul(self, _lift(other, self))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, _lift(other, self))

    def __rtruediv__(self, other):
        return div(_lift(other, self), self)

    def __neg__(self):
        return mul(self, _lift(-1.0, self))

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{flag})"


class no_grad:
    """Disable graph recording inside a with-block (forward values only)."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


def _lift(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=like.data.dtype))


def _node(data: np.ndarray, parents: tuple, backward_fn: BackwardFn) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward_fn = backward_fn
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(a: np.ndarray, b: np.ndarray) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"shapes {a.shape} and {b.shape} are not broadcastable") from None


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a.data, b.data)
    out = a.data + b.data

    def _bw(g):
        return (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape))

    return _node(out, (a, b), _bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a.data, b.data)
    out = a.data - b.data

    def _bw(g):
        return (_unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape))

    return _node(out, (a, b), _bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a.data, b.data)
    out = a.data * b.data

    def _bw(g):
        return (_unbroadcast(g * b.data, a.data.shape), _unbroadcast(g * a.data, b.data.shape))

    return _node(out, (a, b), _bw)


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a.data, b.data)
    out = a.data / b.data

    def _bw(g):
        ga = _unbroadcast(g / b.data, a.data.shape)
        gb = _unbroadcast(-g * out / b.data, b.data.shape)
        return (ga, gb)

    return _node(out, (a, b), _bw)


_EW_KINDS = {"add": add, "sub": sub, "mul": mul, "div": div}


def ew_binary(a: Tensor, b: Tensor, kind: str) -> Tensor:
    if kind not in _EW_KINDS:
        raise ValueError(f"unknown elementwise kind {kind!r}")
    return _EW_KINDS[kind](a, b)


# ---------------------------------------------------------------------------
# activations and pointwise transcendentals


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    t = np.exp(-np.abs(d))
    out = np.where(d >= 0, 1.0 / (1.0 + t), t / (1.0 + t))

    def _bw(g):
        return (g * out * (1.0 - out),)

    return _node(out, (x,), _bw)


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)

    def _bw(g):
        return (g * (1.0 - out * out),)

    return _node(out, (x,), _bw)


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0.0)
    # derivative at the kink is taken as 0
    mask = x.data > 0

    def _bw(g):
        return (g * mask,)

    return _node(out, (x,), _bw)


_ACTIVATIONS = {"sigmoid": sigmoid, "tanh": tanh, "relu": relu}


def activation(x: Tensor, kind: str) -> Tensor:
    if kind not in _ACTIVATIONS:
        raise ValueError(f"unknown activation kind {kind!r}")
    return _ACTIVATIONS[kind](x)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)

    def _bw(g):
        return (g * out,)

    return _node(out, (x,), _bw)


def log(x: Tensor) -> Tensor:
    out = np.log(x.data)

    def _bw(g):
        return (g / x.data,)

    return _node(out, (x,), _bw)


# ---------------------------------------------------------------------------
# shape and structure


def reshape(x: Tensor, shape) -> Tensor:
    out = x.data.reshape(shape)

    def _bw(g):
        return (g.reshape(x.data.shape),)

    return _node(out, (x,), _bw)


def transpose2d(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise ValueError(f"transpose2d expects a 2-d tensor, got shape {x.data.shape}")
    out = x.data.T

    def _bw(g):
        return (g.T,)

    return _node(out, (x,), _bw)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    if not tensors:
        raise ValueError("concat needs at least one tensor")
    arrays = [t.data for t in tensors]
    out = np.concatenate(arrays, axis=axis)
    sizes = [a.shape[axis] for a in arrays]
    splits = np.cumsum(sizes)[:-1]

    def _bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _node(out, tuple(tensors), _bw)


def gather_rows(x: Tensor, indices) -> Tensor:
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1:
        raise ValueError("gather_rows expects a flat index list")
    n = x.data.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise ValueError(f"gather_rows index out of range for leading extent {n}")
    out = x.data[idx]

    def _bw(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        return (gx,)

    return _node(out, (x,), _bw)


def _normalize_axes(axis, ndim: int):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    axes = []
    for a in axis:
        if not -ndim <= a < ndim:
            raise ValueError(f"axis {a} out of range for {ndim}-d tensor")
        axes.append(a % ndim)
    if len(set(axes)) != len(axes):
        raise ValueError("duplicate reduction axes")
    return tuple(sorted(axes))


def reduce(x: Tensor, axis=None, kind: str = "sum", keepdims: bool = False) -> Tensor:
    if kind not in ("sum", "mean"):
        raise ValueError(f"unknown reduction kind {kind!r}")
    axes = _normalize_axes(axis, x.data.ndim)
    count = 1
    for a in axes:
        count *= x.data.shape[a]
    if kind == "sum":
        out = x.data.sum(axis=axes, keepdims=keepdims)
    else:
        out = x.data.mean(axis=axes, keepdims=keepdims)
    scale = 1.0 if kind == "sum" else 1.0 / count

    def _bw(g):
        gg = g if keepdims or not axes else np.expand_dims(g, axes)
        gg = np.broadcast_to(gg, x.data.shape)
        return (gg * scale if kind == "mean" else gg.copy(),)

    return _node(out, (x,), _bw)


def softmax_axis(x: Tensor, axis: int) -> Tensor:
    (ax,) = _normalize_axes(axis, x.data.ndim)
    shifted = x.data - x.data.max(axis=ax, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=ax, keepdims=True)

    def _bw(g):
        dot = (g * out).sum(axis=ax, keepdims=True)
        return ((g - dot) * out,)

    return _node(out, (x,), _bw)


# ---------------------------------------------------------------------------
# linear algebra, convolution, resampling


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError("matmul expects 2-d tensors")
    if a.data.shape[1] != b.data.shape[0]:
        raise ValueError(f"matmul inner extents differ: {a.data.shape} vs {b.data.shape}")
    out = a.data @ b.data

    def _bw(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return (ga, gb)

    return _node(out, (a, b), _bw)


def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlate a (B, C, H, W) input with an (O, C, kh, kw) kernel."""
    xd, wd = x.data, w.data
    if xd.ndim != 4 or wd.ndim != 4:
        raise ValueError("conv2d expects a 4-d input and a 4-d kernel")
    batch, cin, height, width = xd.shape
    cout, ck, kh, kw = wd.shape
    if cin != ck:
        raise ValueError(f"conv2d channel mismatch: input has {cin}, kernel expects {ck}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError(f"conv2d kernel extents must be odd, got ({kh}, {kw})")
    s, p = int(stride), int(padding)
    if s < 1 or p < 0:
        raise ValueError("conv2d stride must be >= 1 and padding >= 0")
    oh = (height + 2 * p - kh) // s + 1
    ow = (width + 2 * p - kw) // s + 1
    if oh < 1 or ow < 1:
        raise ValueError(f"conv2d output extents ({oh}, {ow}) are not positive")

    xp = np.pad(xd, ((0, 0), (0, 0), (p, p), (p, p))) if p else xd
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::s, ::s]
    cols = np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3))
    cols = cols.reshape(batch, cin * kh * kw, oh * ow)
    wmat = wd.reshape(cout, cin * kh * kw)
    out = np.matmul(wmat, cols).reshape(batch, cout, oh, ow)

    def _bw(g):
        g2 = g.reshape(batch, cout, oh * ow)
        gw = None
        gx = None
        if w.requires_grad:
            gw = np.einsum("bol,bkl->ok", g2, cols, optimize=True).reshape(wd.shape)
        if x.requires_grad:
            gcols = np.matmul(wmat.T, g2).reshape(batch, cin, kh, kw, oh, ow)
            gxp = np.zeros_like(xp)
            for u in range(kh):
                for v in range(kw):
                    gxp[:, :, u : u + s * oh : s, v : v + s * ow : s] += gcols[:, :, u, v]
            gx = gxp[:, :, p : p + height, p : p + width]
        return (gx, gw)

    return _node(out, (x, w), _bw)


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    f = int(factor)
    if f < 1:
        raise ValueError(f"upsample factor must be >= 1, got {factor}")
    d = x.data
    if d.ndim < 2:
        raise ValueError("upsample_nearest expects at least 2 trailing spatial axes")
    out = d.repeat(f, axis=-2).repeat(f, axis=-1)
    height, width = d.shape[-2], d.shape[-1]

    def _bw(g):
        lead = g.shape[:-2]
        gr = g.reshape(*lead, height, f, width, f).sum(axis=(-3, -1))
        return (gr,)

    return _node(out, (x,), _bw)


# ---------------------------------------------------------------------------
# selection (not differentiated)


def topk_indices(values, k: int) -> np.ndarray:
    """Indices of the k largest entries, ties broken toward the lower index."""
    v = values.data if isinstance(values, Tensor) else np.asarray(values)
    if v.ndim != 1:
        raise ValueError(f"topk_indices expects a flat tensor, got shape {v.shape}")
    if not 1 <= k <= v.size:
        raise ValueError(f"k={k} out of range for length {v.size}")
    order = np.argsort(-v, kind="stable")
    return order[:k].astype(np.int64)


# ---------------------------------------------------------------------------
# engine


def backward(loss: Tensor) -> None:
    """Accumulate dLoss/dLeaf on every requires_grad leaf under ``loss``."""
    if loss.data.ndim != 0:
        raise ValueError(f"backward root must be a scalar, got shape {loss.data.shape}")
    nodes = [loss]
    seen = {id(loss)}
    stack = [loss]
    while stack:
        t = stack.pop()
        for p in t._parents:
            if id(p) not in seen:
                seen.add(id(p))
                nodes.append(p)
                stack.append(p)
    nodes.sort(key=lambda t: t._seq)
    grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=loss.data.dtype)}
    for t in reversed(nodes):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        if t._backward_fn is None:
            if t.requires_grad:
                if t.grad is None:
                    t.grad = np.zeros_like(t.data)
                t.grad += g
            continue
        for parent, pg in zip(t._parents, t._backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            prev = grads.get(id(parent))
            grads[id(parent)] = pg if prev is None else prev + pg


def ancestors_in_order(loss: Tensor) -> list:
    """All graph nodes under ``loss`` sorted by execution sequence."""
    nodes = [loss]
    seen = {id(loss)}
    stack = [loss]
    while stack:
        t = stack.pop()
        for p in t._parents:
            if id(p) not in seen:
                seen.add(id(p))
                nodes.append(p)
                stack.append(p)
    return sorted(nodes, key=lambda t: t._seq)
