"""Dense tensors with tape-free reverse-mode differentiation.

Every op returns a new :class:`Tensor`.  When gradient recording is enabled
and at least one operand has ``requires_grad``, the result keeps references
to its parents plus a closure that maps the upstream gradient to one
gradient per parent.  :func:`backward` walks that graph in reverse
topological order.
"""

from __future__ import annotations

import contextlib
import threading

import numpy as np

FLOAT_TYPES = (np.float32, np.float64)

_state = threading.local()


class ShapeError(ValueError):
    pass


class NonFiniteError(ValueError):
    pass


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Evaluate ops without recording a graph."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


def _as_float_array(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data)
    if dtype is not None:
        return arr.astype(dtype, copy=False)
    if arr.dtype.type not in FLOAT_TYPES:
        arr = arr.astype(np.float32)
    return arr


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = _as_float_array(data, dtype)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("tensor data contains NaN or Inf")
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self.op = "leaf"

    @classmethod
    def _result(cls, data, parents, backward, op):
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.op = op
        if grad_enabled() and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._backward = backward
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

    # -- introspection -----------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor._result(self.data, (), None, "detach")

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # -- operators ---------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def max(self, axis=None, keepdims=False):
        return tmax(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if np.isscalar(x):
        return Tensor._result(np.asarray(x, dtype=dtype or np.float64), (), None, "const")
    return Tensor(x, dtype=dtype)


def _operands(a, b):
    a_is, b_is = isinstance(a, Tensor), isinstance(b, Tensor)
    if a_is and not b_is:
        b = _const_like(b, a)
    elif b_is and not a_is:
        a = _const_like(a, b)
    elif not a_is and not b_is:
        a, b = as_tensor(a), as_tensor(b)
    return a, b


def _const_like(x, ref: Tensor) -> Tensor:
    arr = np.asarray(x)
    if arr.dtype.type not in FLOAT_TYPES or arr.ndim == 0:
        arr = arr.astype(ref.dtype)
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError("constant operand contains NaN or Inf")
    return Tensor._result(arr, (), None, "const")


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_shape(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# -- elementwise binary ------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _operands(a, b)
    _broadcast_shape("add", a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor._result(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = _operands(a, b)
    _broadcast_shape("sub", a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor._result(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = _operands(a, b)
    _broadcast_shape("mul", a, b)

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._result(a.data * b.data, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = _operands(a, b)
    _broadcast_shape("div", a, b)
    out = a.data / b.data

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._result(out, (a, b), backward, "div")


def maximum(a, b) -> Tensor:
    """Elementwise max; ties send the gradient to ``a``."""
    a, b = _operands(a, b)
    _broadcast_shape("maximum", a, b)
    pick_a = a.data >= b.data

    def backward(g):
        return _unbroadcast(g * pick_a, a.shape), _unbroadcast(g * ~pick_a, b.shape)

    return Tensor._result(np.maximum(a.data, b.data), (a, b), backward, "maximum")


def power(a: Tensor, exponent: float) -> Tensor:
    exponent = float(exponent)
    out = a.data ** exponent

    def backward(g):
        return (g * exponent * a.data ** (exponent - 1.0),)

    return Tensor._result(out, (a,), backward, "pow")


def matmul(a, b) -> Tensor:
    a, b = _operands(a, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return Tensor._result(a.data @ b.data, (a, b), backward, "matmul")


# -- elementwise unary -------------------------------------------------------

def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return Tensor._result(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    return Tensor._result(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return Tensor._result(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return Tensor._result(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid(a.data)
    return Tensor._result(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def silu(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)
    out = a.data * s

    def backward(g):
        return (g * (s * (1.0 + a.data * (1.0 - s))),)

    return Tensor._result(out, (a,), backward, "silu")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return Tensor._result(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form never overflows
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor._result(out, (a,), backward, "softmax")


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return Tensor._result(out, (a,), backward, "log_softmax")


def bce_with_logits(z: Tensor, y) -> Tensor:
    """Per-element -[y log s(z) + (1-y) log(1-s(z))], computed in log space."""
    y = np.asarray(y, dtype=z.dtype)
    if y.shape != z.shape:
        raise ShapeError(f"bce_with_logits: logits {z.shape} vs targets {y.shape}")
    x = z.data
    out = np.maximum(x, 0) - x * y + np.log1p(np.exp(-np.abs(x)))

    def backward(g):
        return (g * (_sigmoid(x) - y),)

    return Tensor._result(out, (z,), backward, "bce_with_logits")


# -- reductions and shape ----------------------------------------------------

def _expand_reduced(g, shape, axis, keepdims):
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    def backward(g):
        return (_expand_reduced(g, a.shape, axis, keepdims),)

    return Tensor._result(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), backward, "sum")


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    out = np.asarray(a.data.mean(axis=axis, keepdims=keepdims))
    count = a.data.size // max(out.size, 1) if a.data.size else 1

    def backward(g):
        return (_expand_reduced(g / count, a.shape, axis, keepdims),)

    return Tensor._result(out, (a,), backward, "mean")


def tmax(a: Tensor, axis=None, keepdims=False) -> Tensor:
    """Max reduction; tied maxima share the gradient equally."""
    out = np.asarray(a.data.max(axis=axis, keepdims=True))
    hit = a.data == out
    share = hit / hit.sum(axis=axis, keepdims=True)
    result = out if keepdims else np.asarray(out.squeeze() if axis is None else out.squeeze(axis))

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (g * share,)

    return Tensor._result(result, (a,), backward, "max")


def reshape(a: Tensor, shape) -> Tensor:
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {a.shape} as {tuple(shape)}") from None
    return Tensor._result(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    axes = tuple(range(a.ndim))[::-1] if axes is None else tuple(axes)
    inverse = np.argsort(axes)
    return Tensor._result(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),), "transpose")


def getitem(a: Tensor, index) -> Tensor:
    """Basic slicing and integer-array indexing."""
    out = a.data[index]
    basic = _is_basic_index(index)

    def backward(g):
        full = np.zeros(a.shape, dtype=g.dtype)
        if basic:
            full[index] += g
        else:
            np.add.at(full, index, g)
        return (full,)

    return Tensor._result(out, (a,), backward, "slice")


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (slice, int, type(None), type(Ellipsis))) for i in items)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise ShapeError(f"concat: incompatible shapes {ref} and {t.shape} along axis {axis}")
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=ax))

    return Tensor._result(np.concatenate([t.data for t in tensors], axis=ax), tuple(tensors), backward, "concat")


# -- spatial kernels (NCHW) --------------------------------------------------

def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation via im2col and one batched matmul."""
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with kernel {w.shape}")
    if b is not None and b.shape != (w.shape[0],):
        raise ShapeError(f"conv2d: bias {b.shape} does not match kernel {w.shape}")
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    s, p = int(stride), int(padding)
    oh, ow = (h + 2 * p - kh) // s + 1, (wd + 2 * p - kw) // s + 1
    if oh < 1 or ow < 1:
        raise ShapeError(f"conv2d: kernel {w.shape} larger than padded input {x.shape}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    cols = np.empty((n, c, kh, kw, oh, ow), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i:i + s * oh:s, j:j + s * ow:s]
    cols = cols.reshape(n, c * kh * kw, oh * ow)
    w2 = w.data.reshape(o, -1)
    out = np.matmul(w2, cols).reshape(n, o, oh, ow)
    if b is not None:
        out += b.data.reshape(1, o, 1, 1)

    def backward(g):
        g2 = g.reshape(n, o, oh * ow)
        gx = gw = gb = None
        if w.requires_grad:
            gw = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
        if b is not None and b.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        if x.requires_grad:
            dcols = np.matmul(w2.T, g2).reshape(n, c, kh, kw, oh, ow)
            gxp = np.zeros(xp.shape, dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + s * oh:s, j:j + s * ow:s] += dcols[:, :, i, j]
            gx = gxp[:, :, p:p + h, p:p + wd] if p else gxp
        return (gx, gw) if b is None else (gx, gw, gb)

    parents = (x, w) if b is None else (x, w, b)
    return Tensor._result(out, parents, backward, "conv2d")


def _pool_view(x: Tensor, k: int, op: str):
    n, c, h, w = x.shape
    if h % k or w % k:
        raise ShapeError(f"{op}: spatial size {(h, w)} not divisible by window {k}")
    return x.data.reshape(n, c, h // k, k, w // k, k)


def avg_pool2d(x: Tensor, k: int = 2) -> Tensor:
    """Non-overlapping k x k average pooling (stride = k)."""
    out = _pool_view(x, k, "avg_pool2d").mean(axis=(3, 5))

    def backward(g):
        g6 = np.broadcast_to(g[:, :, :, None, :, None] / (k * k), _pool_view(x, k, "").shape)
        return (g6.reshape(x.shape),)

    return Tensor._result(out, (x,), backward, "avg_pool2d")


def max_pool2d(x: Tensor, k: int = 2) -> Tensor:
    """Non-overlapping k x k max pooling (stride = k); ties share the gradient."""
    v = _pool_view(x, k, "max_pool2d")
    out = v.max(axis=(3, 5))

    def backward(g):
        hit = v == out[:, :, :, None, :, None]
        share = hit / hit.sum(axis=(3, 5), keepdims=True)
        return ((share * g[:, :, :, None, :, None]).reshape(x.shape),)

    return Tensor._result(out, (x,), backward, "max_pool2d")


def upsample_nearest(x: Tensor, k: int = 2) -> Tensor:
    n, c, h, w = x.shape
    out = np.broadcast_to(x.data[:, :, :, None, :, None], (n, c, h, k, w, k)).reshape(n, c, h * k, w * k)

    def backward(g):
        return (g.reshape(n, c, h, k, w, k).sum(axis=(3, 5)),)

    return Tensor._result(out, (x,), backward, "upsample_nearest")


def space_to_depth(x: Tensor, k: int = 2) -> Tensor:
    """(N, C, H, W) -> (N, C*k*k, H/k, W/k)."""
    n, c, h, w = x.shape
    if h % k or w % k:
        raise ShapeError(f"space_to_depth: spatial size {(h, w)} not divisible by {k}")
    out = x.data.reshape(n, c, h // k, k, w // k, k).transpose(0, 1, 3, 5, 2, 4).reshape(n, c * k * k, h // k, w // k)

    def backward(g):
        return (g.reshape(n, c, k, k, h // k, w // k).transpose(0, 1, 4, 2, 5, 3).reshape(x.shape),)

    return Tensor._result(out, (x,), backward, "space_to_depth")


def depth_to_space(x: Tensor, k: int = 2) -> Tensor:
    """Inverse of :func:`space_to_depth`."""
    n, ck, h, w = x.shape
    if ck % (k * k):
        raise ShapeError(f"depth_to_space: channels {ck} not divisible by {k * k}")
    c = ck // (k * k)
    out = x.data.reshape(n, c, k, k, h, w).transpose(0, 1, 4, 2, 5, 3).reshape(n, c, h * k, w * k)

    def backward(g):
        return (g.reshape(n, c, h, k, w, k).transpose(0, 1, 3, 5, 2, 4).reshape(x.shape),)

    return Tensor._result(out, (x,), backward, "depth_to_space")


# -- reverse pass ------------------------------------------------------------

def _topo_order(root: Tensor):
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
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor, params=None) -> None:
    """Populate ``.grad`` on every leaf with ``requires_grad`` reachable from ``loss``.

    Leaf gradients are overwritten, not accumulated across calls.  When
    ``params`` (a ParameterSet) is given, parameters the loss does not
    depend on receive zero gradients.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not np.all(np.isfinite(loss.data)):
        raise NonFiniteError(f"backward: loss is not finite ({loss.data.reshape(-1)[0]})")
    if params is not None:
        for t in params.values():
            t.grad = np.zeros_like(t.data) if t.requires_grad else None
    if not loss.requires_grad:
        return
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = np.array(g, dtype=node.dtype, copy=True).reshape(node.shape)
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
