"""Dense reverse-mode automatic differentiation on top of numpy.

Every op returns a new :class:`Tensor`; when gradient recording is on and
any input requires a gradient, the result keeps references to its parents
and a closure mapping the output adjoint to one adjoint per parent.
:func:`backward` walks that graph in reverse topological order.

All values are float64.  Ops broadcast like numpy and reduce adjoints back
to the parent's shape.
"""
from __future__ import annotations

import contextlib
import contextvars
from typing import Callable, Iterable, Sequence

import numpy as np

_GRAD_ENABLED = contextvars.ContextVar("ctattn_grad_enabled", default=True)
_DEBUG = contextvars.ContextVar("ctattn_debug", default=False)


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


@contextlib.contextmanager
def no_grad():
    token = _GRAD_ENABLED.set(False)
    try:
        yield
    finally:
        _GRAD_ENABLED.reset(token)


@contextlib.contextmanager
def enable_grad():
    token = _GRAD_ENABLED.set(True)
    try:
        yield
    finally:
        _GRAD_ENABLED.reset(token)


@contextlib.contextmanager
def debug_mode(on: bool = True):
    """Raise :class:`NonFiniteError` as soon as an op produces inf/nan."""
    token = _DEBUG.set(on)
    try:
        yield
    finally:
        _DEBUG.reset(token)


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED.get()


class Tensor:
    """A float64 array that can take part in reverse-mode differentiation."""

    __slots__ = ("data", "requires_grad", "grad", "name", "op", "_parents", "_backward")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op}{label}, requires_grad={self.requires_grad})"

    def __len__(self):
        return len(self.data)

    # -- operator sugar ------------------------------------------------
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

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return getitem(self, index)

    # -- method forms --------------------------------------------------
    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def tanh(self):
        return tanh(self)

    def sigmoid(self):
        return sigmoid(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    if _DEBUG.get() and not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{op}: non-finite value in output of shape {data.shape}")
    out = Tensor(data)
    out.op = op
    if _GRAD_ENABLED.get() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def function(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    """Register a custom op: ``backward(g)`` returns one gradient (or None)
    per parent."""
    return _make(np.asarray(data, dtype=np.float64), [as_tensor(p) for p in parents], backward, op)


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} are not broadcast-compatible") from None


# ---------------------------------------------------------------------------
# Elementwise binary ops
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.data * b.data, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a, b)
    out = a.data / b.data

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), backward, "div")


def scale(a, c: float) -> Tensor:
    """Multiply by a python scalar (no graph node for the constant)."""
    a = as_tensor(a)
    c = float(c)
    return _make(a.data * c, (a,), lambda g: (g * c,), "scale")


def neg(a) -> Tensor:
    return scale(a, -1.0)


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    p = float(exponent)
    return _make(a.data ** p, (a,), lambda g: (g * p * a.data ** (p - 1.0),), "pow")


def where(cond, a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    cond = np.asarray(cond, dtype=bool)

    def backward(g):
        return (_unbroadcast(np.where(cond, g, 0.0), a.shape),
                _unbroadcast(np.where(cond, 0.0, g), b.shape))

    return _make(np.where(cond, a.data, b.data), (a, b), backward, "where")


# ---------------------------------------------------------------------------
# Elementwise unary ops
# ---------------------------------------------------------------------------

def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (0.5 * g / out,), "sqrt")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def _sigmoid_np(x):
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _sigmoid_np(a.data)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def softplus(a, beta: float = 1.0) -> Tensor:
    """``beta * log(1 + exp(x / beta))``, evaluated without overflow."""
    a = as_tensor(a)
    z = a.data / beta
    out = beta * (np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z))))
    return _make(out, (a,), lambda g: (g * _sigmoid_np(z),), "softplus")


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _make(a.data * mask, (a,), lambda g: (g * mask,), "relu")


# ---------------------------------------------------------------------------
# Linear algebra and shape ops
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Matrix product with numpy batching rules; both operands need ndim >= 2.

    A 2-D right operand is applied to the flattened leading axes of ``a`` so
    the product lands in a single BLAS call.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")

    if b.ndim == 2:
        k = a.shape[-1]
        a2 = a.data.reshape(-1, k)
        out = (a2 @ b.data).reshape(a.shape[:-1] + (b.shape[1],))

        def backward(g):
            g2 = g.reshape(-1, b.shape[1])
            ga = (g2 @ b.data.T).reshape(a.shape) if a.requires_grad else None
            gb = a2.T @ g2 if b.requires_grad else None
            return ga, gb

        return _make(out, (a, b), backward, "matmul")

    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError(f"matmul: batch shapes incompatible, {a.shape} @ {b.shape}") from None

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _make(out, (a, b), backward, "matmul")


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} into {tuple(shape)}") from None
    return _make(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(ax % a.ndim for ax in axes)
    inverse = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),), "transpose")


def swapaxes(a, ax1: int, ax2: int) -> Tensor:
    a = as_tensor(a)
    axes = list(range(a.ndim))
    axes[ax1], axes[ax2] = axes[ax2], axes[ax1]
    return transpose(a, axes)


def expand_dims(a, axis: int) -> Tensor:
    a = as_tensor(a)
    return reshape(a, np.expand_dims(a.data, axis).shape)


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    shape = tuple(shape)
    return _make(np.broadcast_to(a.data, shape).copy(), (a,),
                 lambda g: (_unbroadcast(g, a.shape),), "broadcast_to")


def getitem(a, index) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _make(a.data[index], (a,), backward, "getitem")


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        shapes = ", ".join(str(t.shape) for t in tensors)
        raise ShapeError(f"concat: incompatible shapes along axis {axis}: {shapes}") from None
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(out, tensors, backward, "concat")


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    return concat([expand_dims(t, axis) for t in tensors], axis=axis)


def block_diag(w, copies: int) -> Tensor:
    """``kron(I_copies, w)`` for a square or rectangular 2-D ``w``."""
    w = as_tensor(w)
    r, c = w.shape

    def backward(g):
        blocks = g.reshape(copies, r, copies, c)
        return (np.einsum("iric->rc", blocks),)

    return _make(np.kron(np.eye(copies), w.data), (w,), backward, "block_diag")


# ---------------------------------------------------------------------------
# Reductions
# ---------------------------------------------------------------------------

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(out, (a,), backward, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    return scale(tsum(a, axis, keepdims), 1.0 / count)


def cumsum(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        return (np.flip(np.cumsum(np.flip(g, axis), axis=axis), axis),)

    return _make(np.cumsum(a.data, axis=axis), (a,), backward, "cumsum")


# ---------------------------------------------------------------------------
# Composite ops with fused backward
# ---------------------------------------------------------------------------

def softmax(a, axis: int = -1, mask=None) -> Tensor:
    """Softmax along ``axis``.  ``mask`` (bool, broadcastable) marks entries
    that take part; masked-out entries get weight exactly zero."""
    a = as_tensor(a)
    if a.shape[axis] < 1:
        raise ShapeError(f"softmax: axis {axis} of shape {a.shape} is empty")
    x = a.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
        if not np.all(mask.any(axis=axis)):
            raise ValueError("softmax: a row has every entry masked out")
        x = np.where(mask, x, -np.inf)
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), backward, "softmax")


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def backward(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return _make(out, (a,), backward, "log_softmax")


def _group_mean_matrix(width: int, groups: int) -> np.ndarray:
    size = width // groups
    return np.kron(np.eye(groups), np.full((size, size), 1.0 / size))


def layer_norm(a, gamma=None, beta=None, groups: int = 1, eps: float = 1e-5) -> Tensor:
    """Layer normalisation over the last axis.

    With ``groups > 1`` the last axis is split into equal contiguous groups
    that are normalised independently (one per attention head).  Group means
    are taken with a block-averaging matmul, which is much faster in numpy
    than a reduction over a short trailing axis.
    """
    a = as_tensor(a)
    width = a.shape[-1]
    if width < 1:
        raise ShapeError("layer_norm: last axis is empty")
    if width % groups:
        raise ShapeError(f"layer_norm: width {width} not divisible into {groups} groups")
    avg = _group_mean_matrix(width, groups)
    lead = a.data.reshape(-1, width)
    centred = lead - lead @ avg
    var = (centred * centred) @ avg
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centred * inv

    parents = [a]
    g_t = b_t = None
    out = xhat
    if gamma is not None:
        g_t = as_tensor(gamma)
        parents.append(g_t)
        out = out * g_t.data
    if beta is not None:
        b_t = as_tensor(beta)
        parents.append(b_t)
        out = out + b_t.data

    def backward(g):
        g2 = g.reshape(-1, width)
        gx = g2 * g_t.data if g_t is not None else g2
        dx = inv * (gx - gx @ avg - xhat * ((gx * xhat) @ avg))
        grads = [dx.reshape(a.shape)]
        if g_t is not None:
            grads.append((g2 * xhat).sum(axis=0).reshape(g_t.shape))
        if b_t is not None:
            grads.append(g2.sum(axis=0).reshape(b_t.shape))
        return tuple(grads)

    return _make(out.reshape(a.shape), parents, backward, "layer_norm")


def dropout(a, rate: float, rng: np.random.Generator | None, training: bool = True) -> Tensor:
    """Inverted dropout: survivors are scaled by ``1 / (1 - rate)``."""
    a = as_tensor(a)
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout: rate must lie in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return a
    if rng is None:
        raise ValueError("dropout: an rng is required when rate > 0")
    keep = (rng.random(a.shape) >= rate) / (1.0 - rate)
    return _make(a.data * keep, (a,), lambda g: (g * keep,), "dropout")


def checkpoint(fn: Callable[..., Tensor], *inputs: Tensor) -> Tensor:
    """Evaluate ``fn(*inputs)`` without storing its interior graph.

    The backward pass re-runs ``fn`` on fresh leaves and differentiates that
    local graph.  ``fn`` must be deterministic and every tensor it needs a
    gradient for must be passed through ``inputs``.
    """
    inputs = tuple(as_tensor(x) for x in inputs)
    with no_grad():
        out = fn(*inputs).data

    def backward(g):
        leaves = [Tensor(x.data, requires_grad=x.requires_grad) for x in inputs]
        with enable_grad():
            local = fn(*leaves)
        grads = _propagate(local, g, leaves)
        return tuple(grads.get(id(leaf)) if leaf.requires_grad else None for leaf in leaves)

    return _make(out, inputs, backward, "checkpoint")


# ---------------------------------------------------------------------------
# Reverse pass
# ---------------------------------------------------------------------------

def _topo_order(root: Tensor) -> list[Tensor]:
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
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def _propagate(root: Tensor, seed: np.ndarray, wanted: Iterable[Tensor] = ()) -> dict[int, np.ndarray]:
    """Accumulate adjoints from ``root`` downwards; returns id -> adjoint for
    leaves and for every tensor in ``wanted``."""
    wanted_ids = {id(t) for t in wanted}
    grads: dict[int, np.ndarray] = {id(root): np.asarray(seed, dtype=np.float64)}
    result: dict[int, np.ndarray] = {}
    for node in reversed(_topo_order(root)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf or id(node) in wanted_ids:
            result[id(node)] = g
        if node._backward is None:
            continue
        parent_grads = node._backward(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    return result


def backward(loss: Tensor, accumulate: bool = True) -> dict[Tensor, np.ndarray]:
    """Differentiate a scalar ``loss``; returns ``{leaf: gradient}``.

    Leaf ``.grad`` fields are accumulated as well (reset them with
    :func:`zero_grad`).
    """
    if loss.size != 1:
        raise ShapeError(f"backward: loss must be a scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return {}
    order = _topo_order(loss)
    leaves = {id(n): n for n in order if n.is_leaf}
    raw = _propagate(loss, np.ones_like(loss.data))
    out = {}
    for key, g in raw.items():
        leaf = leaves.get(key)
        if leaf is None:
            continue
        out[leaf] = g
        if accumulate:
            leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
    return out


def grad(loss: Tensor, inputs: Sequence[Tensor]) -> list[np.ndarray]:
    """Gradients of a scalar ``loss`` w.r.t. ``inputs``; zero for unused ones."""
    if loss.size != 1:
        raise ShapeError(f"grad: loss must be a scalar, got shape {loss.shape}")
    raw = _propagate(loss, np.ones_like(loss.data), inputs) if loss.requires_grad else {}
    return [raw.get(id(x), np.zeros_like(x.data)) for x in inputs]


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


def numerical_grad(fn: Callable[[], Tensor], param: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar ``fn()`` w.r.t. ``param.data``."""
    out = np.zeros_like(param.data)
    flat = param.data.reshape(-1)
    g = out.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = fn().item()
            flat[i] = orig - h
            down = fn().item()
            flat[i] = orig
            g[i] = (up - down) / (2.0 * h)
    return out
