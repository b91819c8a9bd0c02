"""Dense tensors with define-by-run reverse-mode differentiation.

Every op returns a new :class:`Tensor`. When any operand requires a gradient
(and recording is enabled) the result keeps references to its operands plus a
closure mapping the output adjoint to operand adjoints. :meth:`Tensor.backward`
replays those closures in reverse topological order.

Storage is float32 by default. Ops preserve the operand dtype, which lets the
gradient checks run the exact same code in float64.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np

from . import kernels

__all__ = [
    "Tensor",
    "Parameter",
    "ShapeError",
    "GraphError",
    "no_grad",
    "is_grad_enabled",
    "elementwise",
    "add",
    "sub",
    "mul",
    "scale",
    "neg",
    "abs",
    "relu",
    "log",
    "exp",
    "matmul",
    "reduce",
    "sum",
    "mean",
    "reshape",
    "transpose",
    "slice_axis",
    "expand",
    "softmax",
    "log_softmax",
    "conv3d",
    "normalize",
    "batch_norm",
]

_GRAD_ENABLED = True


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class GraphError(RuntimeError):
    """Backward called on a non-scalar, unrecorded, or already-consumed graph."""


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_consumed", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            dtype = np.float32
        self.data = np.ascontiguousarray(np.asarray(data, dtype=dtype))
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple = ()
        self._backward: Callable | None = None
        self._consumed = False

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

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return _wrap(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return self.data.shape[0]

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self) -> None:
        """Populate ``grad`` on every ``requires_grad`` tensor reachable from this scalar."""
        if self.data.size != 1:
            raise GraphError(f"backward requires a scalar loss, got shape {self.shape}")
        if self._consumed:
            raise GraphError("graph already consumed by a previous backward()")
        if not self.requires_grad:
            raise GraphError("loss does not depend on any tensor that requires grad")
        order = _topological_order(self)
        pending = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if node._consumed:
                raise GraphError("stale graph: an intermediate result was consumed by an earlier backward()")
            node.grad = g if node.grad is None else node.grad + g
            if node._backward is not None:
                parent_grads = node._backward(g)
                for parent, pg in zip(node._parents, parent_grads):
                    if pg is None or not parent.requires_grad:
                        continue
                    key = id(parent)
                    pending[key] = pg if key not in pending else pending[key] + pg
            if node._backward is not None or node is self:
                node._parents = ()
                node._backward = None
                node._consumed = True


class Parameter(Tensor):
    """A trainable leaf tensor."""

    __slots__ = ()

    def __init__(self, data, requires_grad: bool = True, dtype=None):
        super().__init__(data, requires_grad=requires_grad, dtype=dtype)


def _topological_order(root: Tensor) -> list:
    order, seen = [], set()
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


def _wrap(data: np.ndarray) -> Tensor:
    t = Tensor.__new__(Tensor)
    t.data = data
    t.requires_grad = False
    t.grad = None
    t._parents = ()
    t._backward = None
    t._consumed = False
    return t


def _result(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    out = _wrap(np.ascontiguousarray(data))
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _same_shape(opname: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{opname}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------- elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape("add", a, b)
    return _result(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape("sub", a, b)
    return _result(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(a: Tensor, s: float) -> Tensor:
    s = a.data.dtype.type(s)
    return _result(a.data * s, (a,), lambda g: (g * s,))


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,))


def abs(a: Tensor) -> Tensor:  # noqa: A001 - mirrors the op name
    sign = np.sign(a.data)
    return _result(np.abs(a.data), (a,), lambda g: (g * sign,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _result(np.where(mask, a.data, 0).astype(a.data.dtype), (a,), lambda g: (g * mask,))


def log(a: Tensor) -> Tensor:
    ad = a.data
    with np.errstate(divide="ignore"):
        out = np.log(ad)
    return _result(out, (a,), lambda g: (g / ad,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,))


_UNARY = {"abs": abs, "relu": relu, "log": log, "exp": exp, "neg": neg}
_BINARY = {"add": add, "sub": sub, "mul": mul}


def elementwise(op: str, a: Tensor, b=None) -> Tensor:
    """Dispatch an elementwise op by name; ``scale`` takes a python scalar as ``b``."""
    if op in _BINARY:
        if b is None:
            raise ValueError(f"{op} needs two operands")
        return _BINARY[op](a, b)
    if op in _UNARY:
        return _UNARY[op](a)
    if op == "scale":
        return scale(a, b)
    raise ValueError(f"unknown elementwise op {op!r}")


# -------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of 2-D operands, or batched over a shared leading axis for 3-D."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim not in (2, 3) or a.ndim != b.ndim:
        raise ShapeError(f"matmul: unsupported ranks {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2] or (a.ndim == 3 and a.shape[0] != b.shape[0]):
        raise ShapeError(f"matmul: dimension mismatch {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        ga = np.matmul(g, np.swapaxes(bd, -1, -2)) if a.requires_grad else None
        gb = np.matmul(np.swapaxes(ad, -1, -2), g) if b.requires_grad else None
        return ga, gb

    return _result(np.matmul(ad, bd), (a, b), backward)


# ------------------------------------------------------------------ reductions


def _norm_axes(axes, ndim: int) -> tuple:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise ShapeError(f"axis {ax} out of range for rank {ndim}")
        out.append(ax % ndim)
    if len(set(out)) != len(out):
        raise ShapeError(f"repeated axis in {tuple(axes)}")
    return tuple(sorted(out))


def reduce(op: str, a: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    if op not in ("sum", "mean"):
        raise ValueError(f"unknown reduction {op!r}")
    axes = _norm_axes(axes, a.ndim)
    shape = a.shape
    count = int(np.prod([shape[ax] for ax in axes])) if axes else 1
    out = a.data.sum(axis=axes, keepdims=keepdims)
    if op == "mean":
        out = out / a.data.dtype.type(count)
    kept = tuple(1 if i in axes else n for i, n in enumerate(shape))

    def backward(g):
        g = np.reshape(g, kept)
        if op == "mean":
            g = g / g.dtype.type(count)
        return (np.broadcast_to(g, shape).copy(),)

    return _result(np.asarray(out, dtype=a.data.dtype), (a,), backward)


def sum(a: Tensor, axes=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    return reduce("sum", a, axes, keepdims)


def mean(a: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    return reduce("mean", a, axes, keepdims)


# ----------------------------------------------------------------- shape ops


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {old} to {shape}") from exc
    return _result(out, (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, perm) -> Tensor:
    perm = tuple(perm)
    inv = tuple(np.argsort(perm))
    return _result(a.data.transpose(perm), (a,), lambda g: (g.transpose(inv),))


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    """Contiguous slice ``[start, stop)`` along one axis."""
    axis = _norm_axes(axis, a.ndim)[0]
    n = a.shape[axis]
    if not 0 <= start <= stop <= n:
        raise ShapeError(f"slice [{start}, {stop}) out of range for axis of length {n}")
    index = [slice(None)] * a.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)
    shape, dtype = a.shape, a.dtype

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        full[index] = g
        return (full,)

    return _result(a.data[index], (a,), backward)


def expand(a: Tensor, shape) -> Tensor:
    """Explicitly repeat size-1 axes to ``shape`` (ranks must match)."""
    shape = tuple(shape)
    if a.ndim != len(shape) or any(s != t and s != 1 for s, t in zip(a.shape, shape)):
        raise ShapeError(f"cannot expand {a.shape} to {shape}")
    axes = tuple(i for i, (s, t) in enumerate(zip(a.shape, shape)) if s != t)
    return _result(
        np.broadcast_to(a.data, shape),
        (a,),
        lambda g: (g.sum(axis=axes, keepdims=True) if axes else g,),
    )


# ------------------------------------------------------------------- softmax


def _check_finite(name: str, x: np.ndarray) -> None:
    if not np.all(np.isfinite(x)):
        raise ValueError(f"{name}: non-finite input")


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    _check_finite("softmax", a.data)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    return _result(y, (a,), lambda g: (y * (g - (g * y).sum(axis=axis, keepdims=True)),))


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    _check_finite("log_softmax", a.data)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse
    p = np.exp(y)
    return _result(y, (a,), lambda g: (g - p * g.sum(axis=axis, keepdims=True),))


# --------------------------------------------------------------- convolution


def _triple(v) -> tuple:
    if isinstance(v, int):
        return (v, v, v)
    v = tuple(int(x) for x in v)
    if len(v) != 3:
        raise ValueError(f"expected an int or 3 ints, got {v}")
    return v


def conv3d(x: Tensor, w: Tensor, bias: Tensor | None = None, stride=1, pad=0) -> Tensor:
    """Cross-correlation of ``x`` (N,C,T,H,W) with ``w`` (O,C,kt,kh,kw)."""
    if x.ndim != 5 or w.ndim != 5:
        raise ShapeError(f"conv3d expects 5-d input and weight, got {x.shape} and {w.shape}")
    n, c = x.shape[:2]
    o, cw = w.shape[:2]
    if c != cw:
        raise ShapeError(f"conv3d: input has {c} channels, weight expects {cw}")
    kernel = w.shape[2:]
    stride, pad = _triple(stride), _triple(pad)
    padded = tuple(s + 2 * p for s, p in zip(x.shape[2:], pad))
    if any(k > s for k, s in zip(kernel, padded)):
        raise ShapeError(f"conv3d: kernel {kernel} larger than padded input {padded}")
    out_size = tuple((s - k) // st + 1 for s, k, st in zip(padded, kernel, stride))
    xpad = x.data
    if any(pad):
        xpad = np.pad(xpad, ((0, 0), (0, 0)) + tuple((p, p) for p in pad))
    cols = kernels.im2col3d(xpad, kernel, stride, out_size)
    wmat = w.data.reshape(o, -1)
    out = np.matmul(wmat, cols)
    if bias is not None:
        out += bias.data.reshape(1, o, 1)
    out = out.reshape((n, o) + out_size)
    xshape, xpad_shape = x.shape, xpad.shape

    def backward(g):
        g = g.reshape(n, o, -1)
        gx = gw = gb = None
        if w.requires_grad:
            gw = np.matmul(g, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2))
        if x.requires_grad:
            dcols = np.matmul(wmat.T, g)
            dxpad = kernels.col2im3d(dcols, xpad_shape, kernel, stride, out_size)
            gx = dxpad[
                :,
                :,
                pad[0]:pad[0] + xshape[2],
                pad[1]:pad[1] + xshape[3],
                pad[2]:pad[2] + xshape[4],
            ]
        return gx, gw, gb

    parents = (x, w) if bias is None else (x, w, bias)
    return _result(out, parents, backward)


# ------------------------------------------------------------- normalization


def _channel(v: np.ndarray, ndim: int) -> np.ndarray:
    return v.reshape((1, -1) + (1,) * (ndim - 2))


def normalize(x: Tensor, mean: np.ndarray, var: np.ndarray, gamma: Tensor, shift: Tensor, eps: float) -> Tensor:
    """Per-channel ``gamma * (x - mean) / sqrt(var + eps) + shift`` with constant statistics."""
    dt = x.data.dtype
    nd = x.ndim
    inv = 1.0 / np.sqrt(np.asarray(var, dtype=dt) + dt.type(eps))
    xhat = (x.data - _channel(np.asarray(mean, dtype=dt), nd)) * _channel(inv, nd)
    out = xhat * _channel(gamma.data, nd) + _channel(shift.data, nd)
    axes = (0,) + tuple(range(2, nd))

    def backward(g):
        gx = g * _channel(gamma.data * inv, nd) if x.requires_grad else None
        gg = (g * xhat).sum(axis=axes) if gamma.requires_grad else None
        gs = g.sum(axis=axes) if shift.requires_grad else None
        return gx, gg, gs

    return _result(out, (x, gamma, shift), backward)


def batch_stats(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean and biased variance over every axis except 1."""
    axes = (0,) + tuple(range(2, x.ndim))
    mu = x.mean(axis=axes)
    var = ((x - _channel(mu, x.ndim)) ** 2).mean(axis=axes)
    return mu, var


def batch_norm(x: Tensor, gamma: Tensor, shift: Tensor, eps: float):
    """Training-mode normalization; gradients flow through the batch statistics.

    Returns ``(y, mean, var)`` where the statistics are plain arrays.
    """
    dt = x.data.dtype
    nd = x.ndim
    axes = (0,) + tuple(range(2, nd))
    m = x.data.size // x.shape[1]
    mu, var = batch_stats(x.data)
    inv = 1.0 / np.sqrt(var + dt.type(eps))
    xhat = (x.data - _channel(mu, nd)) * _channel(inv, nd)
    out = xhat * _channel(gamma.data, nd) + _channel(shift.data, nd)

    def backward(g):
        gg = (g * xhat).sum(axis=axes)
        gs = g.sum(axis=axes)
        gx = None
        if x.requires_grad:
            dxhat_sum = _channel(gs * gamma.data, nd)
            dxhat_dot = _channel(gg * gamma.data, nd)
            gx = (g * _channel(gamma.data, nd) - (dxhat_sum + xhat * dxhat_dot) / dt.type(m)) * _channel(inv, nd)
        return (
            gx,
            gg if gamma.requires_grad else None,
            gs if shift.requires_grad else None,
        )

    return _result(out, (x, gamma, shift), backward), mu, var

