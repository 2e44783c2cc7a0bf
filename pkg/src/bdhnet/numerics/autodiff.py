"""Reverse-mode automatic differentiation over numpy arrays.

Every differentiable operation returns a :class:`Var` that remembers its
parents and a closure mapping the output adjoint to parent adjoints.  Each
node takes a monotonically increasing sequence number when it is created, so
the set of nodes reachable from an output, sorted by that number, is exactly
the recorded tape in execution order.  :func:`backward` replays it in reverse.
"""

from __future__ import annotations

import itertools
from typing import Callable, Iterable, Sequence

import numpy as np

_counter = itertools.count()


class NonFiniteError(FloatingPointError):
    """Raised when an operation produces NaN or Inf."""

    def __init__(self, op: str, path: str = ""):
        self.op = op
        self.path = path
        where = f" at {path}" if path else ""
        super().__init__(f"non-finite value produced by {op}{where}")


class TraceError(RuntimeError):
    """Raised when a backward pass is requested without a recorded forward."""


class Var:
    """A tensor value on the tape."""

    __slots__ = ("value", "grad", "parents", "backward_fn", "requires_grad", "seq", "op")
    __array_priority__ = 100.0

    def __init__(self, value, parents: Sequence["Var"] = (), backward_fn=None,
                 requires_grad: bool = False, op: str = "leaf"):
        self.value = np.asarray(value)
        self.grad = None
        self.parents = tuple(parents)
        self.backward_fn = backward_fn
        self.requires_grad = requires_grad or any(p.requires_grad for p in self.parents)
        self.seq = next(_counter)
        self.op = op

    @property
    def shape(self) -> tuple:
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def __repr__(self) -> str:
        return f"Var(op={self.op}, shape={self.shape}, dtype={self.dtype})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

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
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def param(value) -> Var:
    """Leaf that accumulates gradient."""
    return Var(np.array(value, copy=True), requires_grad=True, op="param")


def const(value, dtype=None) -> Var:
    if isinstance(value, Var):
        return value
    return Var(np.asarray(value, dtype=dtype), op="const")


def _as_var(x, like: Var | None = None) -> Var:
    if isinstance(x, Var):
        return x
    dtype = like.dtype if like is not None else None
    return Var(np.asarray(x, dtype=dtype), op="const")


def _check(out: np.ndarray, op: str) -> np.ndarray:
    if not np.all(np.isfinite(out)):
        raise NonFiniteError(op)
    return out


def _node(value, parents, backward_fn, op) -> Var:
    value = _check(np.asarray(value), op)
    return Var(value, parents, backward_fn, op=op)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def backward(out: Var, upstream=None, wrt: Iterable[Var] | None = None) -> None:
    """Accumulate d(out)/d(leaf) into ``leaf.grad`` for every reachable leaf.

    ``upstream`` defaults to ones (so a scalar ``out`` yields plain gradients).
    Gradients are accumulated, not overwritten; call :func:`zero_grad` between
    independent passes.
    """
    if not isinstance(out, Var):
        raise TraceError("backward requires a Var produced on the tape")
    if not out.requires_grad:
        raise TraceError("output does not depend on any parameter; nothing was traced")
    if upstream is None:
        upstream = np.ones_like(out.value)
    upstream = np.asarray(upstream, dtype=out.dtype)
    if upstream.shape != out.shape:
        raise ValueError(f"upstream shape {upstream.shape} != output shape {out.shape}")

    nodes = {}
    stack = [out]
    while stack:
        v = stack.pop()
        if v.seq in nodes or not v.requires_grad:
            continue
        nodes[v.seq] = v
        stack.extend(v.parents)

    adj = {out.seq: upstream}
    for seq in sorted(nodes, reverse=True):
        v = nodes[seq]
        g = adj.pop(seq, None)
        if g is None:
            continue
        if v.backward_fn is None:
            v.grad = g.copy() if v.grad is None else v.grad + g
            continue
        grads = v.backward_fn(g)
        for p, pg in zip(v.parents, grads):
            if pg is None or not p.requires_grad:
                continue
            if p.seq in adj:
                adj[p.seq] = adj[p.seq] + pg
            else:
                adj[p.seq] = pg
    if wrt is not None:
        for w in wrt:
            if w.grad is None:
                w.grad = np.zeros_like(w.value)


def zero_grad(params: Iterable[Var]) -> None:
    for p in params:
        p.grad = None


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Var:
    a, b = _as_var(a, b if isinstance(b, Var) else None), _as_var(b, a if isinstance(a, Var) else None)
    sa, sb = a.shape, b.shape
    return _node(a.value + b.value, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Var:
    a, b = _as_var(a, b if isinstance(b, Var) else None), _as_var(b, a if isinstance(a, Var) else None)
    sa, sb = a.shape, b.shape
    return _node(a.value - b.value, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Var:
    a, b = _as_var(a, b if isinstance(b, Var) else None), _as_var(b, a if isinstance(a, Var) else None)
    av, bv = a.value, b.value
    return _node(av * bv, (a, b),
                 lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)), "mul")


def div(a, b) -> Var:
    a, b = _as_var(a, b if isinstance(b, Var) else None), _as_var(b, a if isinstance(a, Var) else None)
    av, bv = a.value, b.value
    out = av / bv
    return _node(out, (a, b),
                 lambda g: (_unbroadcast(g / bv, av.shape), _unbroadcast(-g * out / bv, bv.shape)),
                 "div")


def neg(a: Var) -> Var:
    return _node(-a.value, (a,), lambda g: (-g,), "neg")


def exp(a: Var) -> Var:
    out = np.exp(a.value)
    return _node(out, (a,), lambda g: (g * out,), "exp")


def log(a: Var) -> Var:
    av = a.value
    return _node(np.log(av), (a,), lambda g: (g / av,), "log")


def square(a: Var) -> Var:
    av = a.value
    return _node(av * av, (a,), lambda g: (2.0 * g * av,), "square")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so large |x| never overflows exp
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Var) -> Var:
    out = _sigmoid(a.value)
    return _node(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def relu(a: Var) -> Var:
    mask = a.value > 0
    return _node(np.where(mask, a.value, 0).astype(a.dtype), (a,), lambda g: (g * mask,), "relu")


def where(cond: np.ndarray, a, b) -> Var:
    """Select elementwise with a constant boolean condition."""
    a, b = _as_var(a, b if isinstance(b, Var) else None), _as_var(b, a if isinstance(a, Var) else None)
    sa, sb = a.shape, b.shape
    return _node(np.where(cond, a.value, b.value), (a, b),
                 lambda g: (_unbroadcast(np.where(cond, g, 0), sa),
                            _unbroadcast(np.where(cond, 0, g), sb)), "where")


def heaviside_surrogate(x: Var, alpha: float) -> Var:
    """Step function ``x >= 0`` whose backward is d/dx sigmoid(x / alpha)."""
    xv = x.value
    out = (xv >= 0).astype(xv.dtype)

    def bw(g):
        s = _sigmoid(xv / alpha)
        return (g * s * (1.0 - s) / alpha,)

    return _node(out, (x,), bw, "heaviside_surrogate")


def straight_through_step(x: Var, width: float = 0.5) -> Var:
    """Step function ``x >= 0`` with identity backward inside ``|x| <= width``."""
    xv = x.value
    out = (xv >= 0).astype(xv.dtype)
    window = np.abs(xv) <= width
    return _node(out, (x,), lambda g: (g * window,), "straight_through_step")


# ---------------------------------------------------------------- reductions

def sum_(a: Var, axis=None, keepdims: bool = False) -> Var:
    shape = a.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _node(a.value.sum(axis=axis, keepdims=keepdims), (a,), bw, "sum")


def mean(a: Var, axis=None, keepdims: bool = False) -> Var:
    n = a.value.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return sum_(a, axis, keepdims) * (1.0 / float(n))


def amax(a: Var) -> Var:
    """Global max; the adjoint goes to the first maximising element."""
    idx = np.unravel_index(np.argmax(a.value), a.shape)
    shape, dtype = a.shape, a.dtype

    def bw(g):
        out = np.zeros(shape, dtype=dtype)
        out[idx] = g
        return (out,)

    return _node(a.value[idx], (a,), bw, "amax")


def amin(a: Var) -> Var:
    idx = np.unravel_index(np.argmin(a.value), a.shape)
    shape, dtype = a.shape, a.dtype

    def bw(g):
        out = np.zeros(shape, dtype=dtype)
        out[idx] = g
        return (out,)

    return _node(a.value[idx], (a,), bw, "amin")


def softmax(a: Var, axis: int = -1) -> Var:
    z = a.value - a.value.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _node(out, (a,), bw, "softmax")


# ---------------------------------------------------------------- shape ops

def reshape(a: Var, shape) -> Var:
    old = a.shape
    return _node(a.value.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a: Var, axes=None) -> Var:
    inv = None if axes is None else tuple(np.argsort(axes))
    return _node(np.transpose(a.value, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def getitem(a: Var, idx) -> Var:
    shape, dtype = a.shape, a.dtype

    parts = idx if isinstance(idx, tuple) else (idx,)
    basic = all(isinstance(i, (int, np.integer, slice)) or i is Ellipsis or i is None for i in parts)

    def bw(g):
        out = np.zeros(shape, dtype=dtype)
        if basic:
            out[idx] = g
        else:
            np.add.at(out, idx, g)
        return (out,)

    return _node(a.value[idx], (a,), bw, "getitem")


def concat(xs: Sequence[Var], axis: int = -1) -> Var:
    xs = [_as_var(x) for x in xs]
    sizes = [x.shape[axis] for x in xs]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _node(np.concatenate([x.value for x in xs], axis=axis), xs, bw, "concat")


def stack(xs: Sequence[Var], axis: int = 0) -> Var:
    xs = [_as_var(x) for x in xs]

    def bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(xs)))

    return _node(np.stack([x.value for x in xs], axis=axis), xs, bw, "stack")


def pad_reflect(a: Var, pad_width) -> Var:
    """Reflect-pad; ``pad_width`` as in ``np.pad``."""
    shape = a.shape
    index = np.arange(int(np.prod(shape))).reshape(shape)
    src = np.pad(index, pad_width, mode="reflect").ravel()

    def bw(g):
        out = np.zeros(int(np.prod(shape)), dtype=g.dtype)
        np.add.at(out, src, g.ravel())
        return (out.reshape(shape),)

    return _node(np.pad(a.value, pad_width, mode="reflect"), (a,), bw, "pad_reflect")


def upsample_nearest(a: Var, factor: int = 2) -> Var:
    """Nearest-neighbour upsampling of the two spatial axes of ``[..., H, W, C]``."""
    v = a.value.repeat(factor, axis=-3).repeat(factor, axis=-2)
    shape = a.shape

    def bw(g):
        h, w = shape[-3], shape[-2]
        g = g.reshape(*shape[:-3], h, factor, w, factor, shape[-1])
        return (g.sum(axis=(-4, -2)),)

    return _node(v, (a,), bw, "upsample_nearest")


def avg_pool2(a: Var) -> Var:
    """2x2 average pooling of ``[..., H, W, C]`` (H, W even)."""
    shape = a.shape
    h, w = shape[-3], shape[-2]
    v = a.value.reshape(*shape[:-3], h // 2, 2, w // 2, 2, shape[-1]).mean(axis=(-4, -2))

    def bw(g):
        g = np.expand_dims(np.expand_dims(g, -2), -4) * 0.25
        g = np.broadcast_to(g, (*shape[:-3], h // 2, 2, w // 2, 2, shape[-1]))
        return (g.reshape(shape).copy(),)

    return _node(v, (a,), bw, "avg_pool2")


# ---------------------------------------------------------------- linear algebra

def matmul(a, b) -> Var:
    a, b = _as_var(a, b if isinstance(b, Var) else None), _as_var(b, a if isinstance(a, Var) else None)
    av, bv = a.value, b.value

    def bw(g):
        ga = g @ np.swapaxes(bv, -1, -2)
        gb = np.swapaxes(av, -1, -2) @ g
        return _unbroadcast(ga, av.shape), _unbroadcast(gb, bv.shape)

    return _node(av @ bv, (a, b), bw, "matmul")


def custom(value: np.ndarray, parents: Sequence[Var], backward_fn: Callable, op: str) -> Var:
    """Record an operation whose forward was computed by the caller."""
    return _node(value, parents, backward_fn, op)


def conv2d(x, kernel: Var, bias: Var | None = None, stride: int = 1, padding: int | None = None) -> Var:
    from . import kernels

    x = _as_var(x, kernel)
    xv, kv = x.value, kernel.value
    out = kernels.conv2d(xv, kv, None if bias is None else bias.value, stride, padding)

    def bw(g):
        gx, gk, gb = kernels.conv2d_backward(g, xv, kv, stride, padding)
        return (gx, gk) if bias is None else (gx, gk, gb)

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return _node(out, parents, bw, "conv2d")


def bilinear_gather(grid: Var, px, py) -> Var:
    """Differentiable in the sampled grid and in both coordinate arrays."""
    from . import kernels

    px, py = _as_var(px, grid), _as_var(py, grid)
    gv, xv, yv = grid.value, px.value, py.value

    def bw(g):
        return kernels.bilinear_gather_backward(g, gv, xv, yv)

    return _node(kernels.bilinear_gather(gv, xv, yv), (grid, px, py), bw, "bilinear_gather")


def softmax_attention(q: Var, k: Var, v: Var) -> Var:
    d = q.shape[-1]
    if d == 0:
        from .kernels import ShapeError
        raise ShapeError("softmax_attention", "d", 0, "> 0")
    logits = matmul(q, transpose(k, tuple(range(k.ndim - 2)) + (k.ndim - 1, k.ndim - 2)))
    return matmul(softmax(logits * (1.0 / np.sqrt(d)), axis=-1), v)


def clip(a: Var, lo: float, hi: float) -> Var:
    """Clamp; the adjoint passes only where the input lies inside ``[lo, hi]``."""
    av = a.value
    inside = (av >= lo) & (av <= hi)
    return _node(np.clip(av, lo, hi), (a,), lambda g: (g * inside,), "clip")
