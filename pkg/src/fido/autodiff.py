"""Small reverse-mode differentiation engine over dense float64 arrays.

Values are plain numpy arrays (row-major, float64). A :class:`Node` wraps a
value together with the operation that produced it; graphs are rebuilt on
every evaluation and differentiated with :func:`backward`.

Shape rules are deliberately strict: binary elementwise ops require equal
shapes, except that a 0-d operand (a Python float is promoted to one) may be
combined with any tensor.  Op-specific rules are listed in ``forward_op``.
"""
from __future__ import annotations

from typing import Callable, Dict, Optional, Sequence, Tuple, Union

import numpy as np

Array = np.ndarray
Operand = Union["Node", float, int]


class ShapeError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


def as_tensor(data) -> Array:
    """Return ``data`` as a finite float64 array (a copy is made only if needed)."""
    arr = np.asarray(data, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise NumericError("tensor contains non-finite values")
    return arr


class Node:
    __slots__ = ("op", "inputs", "value", "grad", "requires_grad", "_vjp")

    def __init__(self, value: Array, op: str = "leaf", inputs: Tuple["Node", ...] = (),
                 vjp: Optional[Callable] = None, requires_grad: bool = False):
        self.op = op
        self.inputs = inputs
        self.value = value
        self.grad: Optional[Array] = None
        self.requires_grad = requires_grad
        self._vjp = vjp

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape

    def item(self) -> float:
        return float(self.value.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.value)

    def __repr__(self) -> str:
        return f"Node(op={self.op!r}, shape={self.shape})"

    def __add__(self, other: Operand) -> "Node":
        return forward_op("add", (self, other))

    def __radd__(self, other: Operand) -> "Node":
        return forward_op("add", (other, self))

    def __sub__(self, other: Operand) -> "Node":
        return forward_op("sub", (self, other))

    def __rsub__(self, other: Operand) -> "Node":
        return forward_op("sub", (other, self))

    def __mul__(self, other: Operand) -> "Node":
        return forward_op("mul", (self, other))

    def __rmul__(self, other: Operand) -> "Node":
        return forward_op("mul", (other, self))

    def __neg__(self) -> "Node":
        return forward_op("mul", (-1.0, self))

    def __matmul__(self, other: "Node") -> "Node":
        return forward_op("matmul", (self, other))


def constant(data) -> Node:
    return Node(as_tensor(data))


def parameter(data) -> Node:
    return Node(np.array(as_tensor(data), copy=True), requires_grad=True)


def _lift(x: Operand) -> Node:
    if isinstance(x, Node):
        return x
    if isinstance(x, (int, float, np.floating, np.integer)):
        return Node(np.asarray(float(x)))
    raise TypeError(f"cannot use {type(x).__name__} as a graph operand")


# --------------------------------------------------------------------------
# op implementations: each forward returns (value, vjp) where vjp maps the
# output cotangent to a tuple of input cotangents.


def _same_or_scalar(tag: str, a: Array, b: Array) -> None:
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        raise ShapeError(f"{tag}: incompatible shapes {a.shape} and {b.shape}")


def _reduce_to(g: Array, like: Array) -> Array:
    return np.asarray(g.sum()) if like.ndim == 0 and g.ndim != 0 else g


def _add(a, b):
    _same_or_scalar("add", a, b)
    return a + b, lambda g: (_reduce_to(g, a), _reduce_to(g, b))


def _sub(a, b):
    _same_or_scalar("sub", a, b)
    return a - b, lambda g: (_reduce_to(g, a), _reduce_to(-g, b))


def _mul(a, b):
    _same_or_scalar("mul", a, b)
    return a * b, lambda g: (_reduce_to(g * b, a), _reduce_to(g * a, b))


def _rowwise(a, b):
    """a @ b with every output row computed the same way whatever the row count.

    BLAS picks kernels by matrix shape, so one image scored alone and inside a
    batch can differ in the last bit; forward passes use this instead.
    """
    return np.einsum("ik,kj->ij", a, b)


def _matmul(a, b):
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    return _rowwise(a, b), lambda g: (g @ b.T, a.T @ g)


def _conv2d(x, w, b=None, stride=1, padding=0):
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: incompatible shapes {x.shape} and {w.shape}")
    if b is not None and b.shape != (w.shape[0],):
        raise ShapeError(f"conv2d: bias shape {b.shape} does not match {w.shape[0]} filters")
    n, c, h, wd = x.shape
    f, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
    hp, wp = xp.shape[2], xp.shape[3]
    if hp < kh or wp < kw:
        raise ShapeError(f"conv2d: kernel {w.shape} larger than padded input {xp.shape}")
    ho, wo = (hp - kh) // stride + 1, (wp - kw) // stride + 1
    # im2col: rows are output positions (n, ho, wo), columns are (c, kh, kw)
    patches = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    patches = patches[:, :, ::stride, ::stride]
    cols = patches.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    wmat = w.reshape(f, -1)
    out = _rowwise(cols, wmat.T)
    if b is not None:
        out += b
    out = np.ascontiguousarray(out.reshape(n, ho, wo, f).transpose(0, 3, 1, 2))

    def vjp(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, f)
        gw = (gmat.T @ cols).reshape(w.shape)
        gcols = (gmat @ wmat).reshape(n, ho, wo, c, kh, kw)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                    gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        gx = gxp[:, :, padding:padding + h, padding:padding + wd] if padding else gxp
        grads = (gx, gw)
        if b is not None:
            grads += (gmat.sum(axis=0),)
        return grads

    return out, vjp


def _relu(a):
    mask = a > 0
    return np.where(mask, a, 0.0), lambda g: (g * mask,)


def _sigmoid(a):
    s = np.empty_like(a)
    pos = a >= 0
    s[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    e = np.exp(a[~pos])
    s[~pos] = e / (1.0 + e)
    return s, lambda g: (g * s * (1.0 - s),)


def _log(a):
    if np.any(a <= 0):
        raise NumericError("log: non-positive input")
    return np.log(a), lambda g: (g / a,)


def _exp(a):
    out = np.exp(a)
    return out, lambda g: (g * out,)


def _abs(a):
    return np.abs(a), lambda g: (g * np.sign(a),)


def _square(a):
    return a * a, lambda g: (2.0 * g * a,)


def _sum(a, axis=None):
    out = np.asarray(a.sum(axis=axis))

    def vjp(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return out, vjp


def _mean(a, axis=None):
    count = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    out, sum_vjp = _sum(a, axis)
    return out / count, lambda g: (sum_vjp(g)[0] / count,)


def _pool_view(tag, a, size):
    if a.ndim != 4 or a.shape[2] % size or a.shape[3] % size:
        raise ShapeError(f"{tag}: shape {a.shape} not divisible by pool size {size}")
    n, c, h, w = a.shape
    return a.reshape(n, c, h // size, size, w // size, size)


def _avg_pool(a, size=2):
    v = _pool_view("avg_pool", a, size)
    out = v.mean(axis=(3, 5))

    def vjp(g):
        gv = np.broadcast_to(g[:, :, :, None, :, None] / (size * size), v.shape)
        return (gv.reshape(a.shape).copy(),)

    return out, vjp


def _max_pool(a, size=2):
    v = _pool_view("max_pool", a, size)
    n, c, ho, _, wo, _ = v.shape
    # windows flattened row-major so argmax picks the first maximum on ties
    win = v.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, size * size)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def vjp(g):
        gwin = np.zeros_like(win)
        np.put_along_axis(gwin, idx[..., None], g[..., None], axis=-1)
        gv = gwin.reshape(n, c, ho, wo, size, size).transpose(0, 1, 2, 4, 3, 5)
        return (gv.reshape(a.shape),)

    return out, vjp


def _softmax(a, axis=-1):
    shifted = a - a.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return s, vjp


def _mix_weights(tag, x, z):
    """Broadcast a mask that is shared across the channel axis."""
    if z.shape == x.shape:
        return z, lambda gz: gz
    if x.ndim >= 3 and z.shape == x.shape[:-3] + x.shape[-2:]:
        zb = np.expand_dims(z, -3)
        return zb, lambda gz: gz.sum(axis=-3)
    raise ShapeError(f"{tag}: mask shape {z.shape} incompatible with image shape {x.shape}")


def _elementwise_mix(x, xhat, z):
    if x.shape != xhat.shape:
        raise ShapeError(f"elementwise_mix: image shapes {x.shape} and {xhat.shape} differ")
    zb, collapse = _mix_weights("elementwise_mix", x, z)
    out = zb * x + (1.0 - zb) * xhat
    return out, lambda g: (g * zb, g * (1.0 - zb), collapse(g * (x - xhat)))


def bilinear_matrix(n_in: int, n_out: int) -> Array:
    """Row-stochastic 1-D bilinear interpolation matrix (align_corners=False)."""
    m = np.zeros((n_out, n_in))
    scale = n_in / n_out
    for i in range(n_out):
        src = max((i + 0.5) * scale - 0.5, 0.0)
        i0 = min(int(np.floor(src)), n_in - 1)
        i1 = min(i0 + 1, n_in - 1)
        frac = src - i0
        m[i, i0] += 1.0 - frac
        m[i, i1] += frac
    return m


def _bilinear_upsample(a, size):
    if a.ndim < 2:
        raise ShapeError(f"bilinear_upsample: need at least 2 dims, got {a.shape}")
    h_out, w_out = size
    if h_out < a.shape[-2] or w_out < a.shape[-1]:
        raise ShapeError(f"bilinear_upsample: target {size} smaller than input {a.shape[-2:]}")
    mh = bilinear_matrix(a.shape[-2], h_out)
    mw = bilinear_matrix(a.shape[-1], w_out)
    out = np.matmul(np.matmul(mh, a), mw.T)
    return out, lambda g: (np.matmul(np.matmul(mh.T, g), mw),)


def _reshape(a, shape):
    try:
        out = a.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot reshape {a.shape} to {shape}") from exc
    return out, lambda g: (g.reshape(a.shape),)


def _take(a, index):
    """Select column ``index`` of a 2-D array, giving a 1-D result."""
    if a.ndim != 2 or not 0 <= index < a.shape[1]:
        raise ShapeError(f"take: index {index} invalid for shape {a.shape}")

    def vjp(g):
        out = np.zeros_like(a)
        out[:, index] = g
        return (out,)

    return a[:, index].copy(), vjp


def _clip(a, lo, hi):
    inside = (a >= lo) & (a <= hi)
    return np.clip(a, lo, hi), lambda g: (g * inside,)


def _bias_add(a, b):
    """Add a per-feature bias along axis 1: (n, k) + (k,) or (n, c, h, w) + (c,)."""
    if a.ndim < 2 or b.shape != (a.shape[1],):
        raise ShapeError(f"bias_add: bias shape {b.shape} incompatible with {a.shape}")
    expand = (slice(None),) + (None,) * (a.ndim - 2)
    axes = (0,) + tuple(range(2, a.ndim))
    return a + b[expand], lambda g: (g, g.sum(axis=axes))


_OPS: Dict[str, Callable] = {
    "add": _add,
    "sub": _sub,
    "mul": _mul,
    "matmul": _matmul,
    "conv2d": _conv2d,
    "relu": _relu,
    "sigmoid": _sigmoid,
    "log": _log,
    "exp": _exp,
    "sum": _sum,
    "mean": _mean,
    "max_pool": _max_pool,
    "avg_pool": _avg_pool,
    "softmax": _softmax,
    "elementwise_mix": _elementwise_mix,
    "bilinear_upsample": _bilinear_upsample,
    "abs": _abs,
    "square": _square,
    "reshape": _reshape,
    "take": _take,
    "clip": _clip,
    "bias_add": _bias_add,
}

OP_TAGS = tuple(_OPS)


def forward_op(tag: str, inputs: Sequence[Operand], **params) -> Node:
    """Apply operation ``tag`` and record the edge for :func:`backward`.

    Shape rules per tag:

    * add, sub, mul: equal shapes, or one 0-d operand.
    * matmul: (n, k) @ (k, m).
    * conv2d: x (n, c, h, w), kernel (f, c, kh, kw), optional bias (f,);
      params ``stride`` and ``padding`` (zero padding on both sides).
    * max_pool, avg_pool: (n, c, h, w) with h, w divisible by ``size``.
    * softmax: along ``axis`` (default last).
    * sum, mean: over ``axis`` (default all).
    * elementwise_mix: (x, xhat, z) -> z*x + (1-z)*xhat; x and xhat equal
      shapes, z either the same shape or x's shape without the channel axis.
    * bilinear_upsample: last two axes resized to ``size`` (align_corners=False).
    * reshape, take (column of a 2-D array), clip(lo, hi), bias_add.
    """
    try:
        fn = _OPS[tag]
    except KeyError:
        raise ValueError(f"unknown op tag {tag!r}") from None
    nodes = tuple(_lift(x) for x in inputs)
    value, vjp = fn(*(n.value for n in nodes), **params)
    value = np.asarray(value, dtype=np.float64)
    if not np.all(np.isfinite(value)):
        raise NumericError(f"{tag}: produced non-finite values")
    requires = any(n.requires_grad for n in nodes)
    return Node(value, tag, nodes, vjp if requires else None, requires)


def _topological(root: Node) -> list:
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
        for parent in node.inputs:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(root: Node) -> Dict[Node, Array]:
    """Reverse-mode pass from a scalar ``root``.

    Returns a mapping from every reachable leaf that requires gradients to
    its gradient.  Gradients are recomputed from scratch on each call and
    also stored on ``node.grad``.
    """
    if root.value.size != 1:
        raise ShapeError(f"backward: root must be scalar, got shape {root.shape}")
    order = _topological(root)
    for node in order:
        node.grad = None
    if not root.requires_grad:
        return {}
    root.grad = np.ones_like(root.value)
    leaves = {}
    for node in reversed(order):
        g = node.grad
        if node._vjp is None:
            if not node.inputs:
                leaves[node] = g
            continue
        for parent, pg in zip(node.inputs, node._vjp(g)):
            if not parent.requires_grad:
                continue
            pg = np.asarray(pg, dtype=np.float64)
            if pg.shape != parent.value.shape:
                raise ShapeError(f"{node.op}: gradient shape {pg.shape} != {parent.value.shape}")
            parent.grad = pg.copy() if parent.grad is None else parent.grad + pg
    return leaves


# --------------------------------------------------------------------------
# thin functional wrappers


def add(a, b): return forward_op("add", (a, b))
def sub(a, b): return forward_op("sub", (a, b))
def mul(a, b): return forward_op("mul", (a, b))
def matmul(a, b): return forward_op("matmul", (a, b))
def relu(a): return forward_op("relu", (a,))
def sigmoid(a): return forward_op("sigmoid", (a,))
def log(a): return forward_op("log", (a,))
def exp(a): return forward_op("exp", (a,))
def abs_(a): return forward_op("abs", (a,))
def square(a): return forward_op("square", (a,))
def softmax(a, axis=-1): return forward_op("softmax", (a,), axis=axis)
def reshape(a, shape): return forward_op("reshape", (a,), shape=tuple(shape))
def take(a, index): return forward_op("take", (a,), index=int(index))
def clip(a, lo, hi): return forward_op("clip", (a,), lo=lo, hi=hi)
def bias_add(a, b): return forward_op("bias_add", (a, b))
def avg_pool(a, size=2): return forward_op("avg_pool", (a,), size=size)
def max_pool(a, size=2): return forward_op("max_pool", (a,), size=size)


def sum_(a, axis=None):
    return forward_op("sum", (a,), axis=axis)


def mean(a, axis=None):
    return forward_op("mean", (a,), axis=axis)


def conv2d(x, w, b=None, stride=1, padding=0):
    inputs = (x, w) if b is None else (x, w, b)
    return forward_op("conv2d", inputs, stride=stride, padding=padding)


def elementwise_mix(x, xhat, z):
    return forward_op("elementwise_mix", (x, xhat, z))


def bilinear_upsample(a, size):
    return forward_op("bilinear_upsample", (a,), size=tuple(size))


# --------------------------------------------------------------------------


def numeric_gradient(f: Callable[[Node], Node], x: Array, step: float = 1e-5) -> Array:
    x = as_tensor(x)
    grad = np.zeros_like(x)
    flat = grad.reshape(-1)
    probe = x.copy()
    pflat = probe.reshape(-1)
    for i in range(pflat.size):
        orig = pflat[i]
        pflat[i] = orig + step
        hi = f(constant(probe)).item()
        pflat[i] = orig - step
        lo = f(constant(probe)).item()
        pflat[i] = orig
        flat[i] = (hi - lo) / (2.0 * step)
    return grad


def analytic_gradient(f: Callable[[Node], Node], x: Array) -> Array:
    leaf = parameter(x)
    out = f(leaf)
    backward(out)
    return np.zeros_like(leaf.value) if leaf.grad is None else leaf.grad


def finite_diff_check(f: Callable[[Node], Node], x, step: float = 1e-5) -> float:
    """Max over coordinates of |analytic - central difference| / max(|analytic|, 1e-8)."""
    if step <= 0:
        raise ValueError("step must be positive")
    a = analytic_gradient(f, x)
    n = numeric_gradient(f, x, step)
    return float(np.max(np.abs(a - n) / np.maximum(np.abs(a), 1e-8), initial=0.0))

