"""Minimal define-by-run reverse-mode autodiff over numpy arrays.

Only the operations the quadratic Swin model needs are provided.  Every op
builds its output eagerly and, when gradients are enabled and some input
requires them, attaches a closure that maps the output gradient to the input
gradients.  ``backward`` walks the recorded graph in reverse topological order.
"""

from __future__ import annotations

import contextlib
import threading

import numpy as np

from .errors import ContractError, NonFiniteError, ShapeError

_state = threading.local()


def _get(name, default):
    return getattr(_state, name, default)


def get_dtype():
    return _get("dtype", np.float32)


def is_grad_enabled():
    return _get("grad_enabled", True)


def is_debug():
    return _get("debug", False)


@contextlib.contextmanager
def precision(dtype):
    """Temporarily create tensors with ``dtype`` (e.g. float64 for gradient checks)."""
    prev = get_dtype()
    _state.dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _state.dtype = prev


@contextlib.contextmanager
def no_grad():
    prev = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


@contextlib.contextmanager
def debug_mode(enabled=True):
    """Check every forward op for NaN/Inf outputs produced from finite inputs."""
    prev = is_debug()
    _state.debug = enabled
    try:
        yield
    finally:
        _state.debug = prev


def set_debug(enabled):
    _state.debug = bool(enabled)


class Tensor:
    """Dense array with an optional gradient slot."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.ascontiguousarray(data, dtype=get_dtype())
        if self.data.ndim == 0:
            self.data = self.data.reshape(())
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name
        self._parents = ()
        self._backward = None
        self._op = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def is_leaf(self):
        return self._backward is None

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data)

    def backward(self, grad=None):
        backward(self, grad)

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return subtract(self, other)

    def __rsub__(self, other):
        return subtract(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return hadamard(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, op, backward_fn):
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out._op = op
    if is_debug() and not np.all(np.isfinite(data)):
        if all(np.all(np.isfinite(p.data)) for p in parents):
            raise NonFiniteError(op)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


def _check_broadcast(a, b, op):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot combine shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- elementwise

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), "add", bw)


def subtract(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "subtract")

    def bw(g):
        return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)

    return _make(a.data - b.data, (a, b), "subtract", bw)


def scale(a, c):
    a = as_tensor(a)
    c = a.data.dtype.type(c)
    return _make(a.data * c, (a,), "scale", lambda g: (g * c,))


def hadamard(a, b):
    """Element-wise product of two tensors of identical shape."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"hadamard: shapes differ, {a.shape} vs {b.shape}")

    def bw(g):
        return g * b.data, g * a.data

    return _make(a.data * b.data, (a, b), "hadamard", bw)


def abs(a):  # noqa: A001
    a = as_tensor(a)
    return _make(np.abs(a.data), (a,), "abs", lambda g: (g * np.sign(a.data),))


def relu(a):
    a = as_tensor(a)
    mask = a.data > 0
    return _make(a.data * mask, (a,), "relu", lambda g: (g * mask,))


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a):
    """Tanh-approximated GELU."""
    a = as_tensor(a)
    x = a.data
    c = x.dtype.type(_GELU_C)
    inner = c * (x + x.dtype.type(0.044715) * x ** 3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def bw(g):
        dinner = c * (1.0 + 3 * x.dtype.type(0.044715) * x ** 2)
        d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
        return (g * d,)

    return _make(out.astype(x.dtype, copy=False), (a,), "gelu", bw)


# ----------------------------------------------------------------- reductions

def sum(a, axis=None, keepdims=False):  # noqa: A001
    a = as_tensor(a)
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(np.asarray(out, dtype=a.data.dtype), (a,), "sum", bw)


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out = np.mean(a.data, axis=axis, keepdims=keepdims)
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([a.shape[i] for i in axes]))
    inv = a.data.dtype.type(1.0 / count)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g * inv, a.shape).copy(),)

    return _make(np.asarray(out, dtype=a.data.dtype), (a,), "mean", bw)


# -------------------------------------------------------------- linear algebra

def matmul(a, c):
    """Batched matrix product ``[..., n, p] @ [p, m]`` or ``[..., n, p] @ [..., p, m]``."""
    a, c = as_tensor(a), as_tensor(c)
    if a.ndim < 2 or c.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-D, got {a.shape} and {c.shape}")
    if a.shape[-1] != c.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} x {c.shape}")
    if c.ndim > 2 and a.shape[:-2] != c.shape[:-2]:
        raise ShapeError(f"matmul: batch dimensions differ, {a.shape} x {c.shape}")

    def bw(g):
        ga = gc = None
        if a.requires_grad:
            ga = g @ np.swapaxes(c.data, -1, -2)
        if c.requires_grad:
            if c.ndim == 2:
                p, m = c.shape
                gc = a.data.reshape(-1, p).T @ g.reshape(-1, m)
            else:
                gc = np.swapaxes(a.data, -1, -2) @ g
        return ga, gc

    return _make(a.data @ c.data, (a, c), "matmul", bw)


def transpose(a):
    """Swap the last two axes."""
    a = as_tensor(a)
    return _make(np.ascontiguousarray(np.swapaxes(a.data, -1, -2)), (a,), "transpose",
                 lambda g: (np.swapaxes(g, -1, -2),))


def permute(a, axes):
    a = as_tensor(a)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _make(np.ascontiguousarray(a.data.transpose(axes)), (a,), "permute",
                 lambda g: (g.transpose(inverse),))


def reshape(a, shape):
    a = as_tensor(a)
    return _make(a.data.reshape(shape), (a,), "reshape", lambda g: (g.reshape(a.shape),))


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    ax = axis % tensors[0].ndim
    for t in tensors[1:]:
        if t.ndim != tensors[0].ndim or any(
            t.shape[i] != tensors[0].shape[i] for i in range(t.ndim) if i != ax
        ):
            raise ShapeError(f"concat: incompatible shapes {[t.shape for t in tensors]}")
    splits = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=ax))

    return _make(np.concatenate([t.data for t in tensors], axis=ax), tuple(tensors), "concat", bw)


def roll(a, shifts, axes):
    a = as_tensor(a)
    neg = -shifts if np.isscalar(shifts) else tuple(-s for s in shifts)
    return _make(np.roll(a.data, shifts, axes), (a,), "roll", lambda g: (np.roll(g, neg, axes),))


def take(a, index):
    """Gather ``a[index]`` along the first axis (integer index array)."""
    a = as_tensor(a)
    index = np.asarray(index)

    def bw(g):
        out = np.zeros_like(a.data)
        np.add.at(out, index, g)
        return (out,)

    return _make(a.data[index], (a,), "take", bw)


# ---------------------------------------------------------------- normalizers

def softmax_lastdim(a, mask=None):
    """Softmax over the last axis; positions where ``mask`` is True get -inf logits."""
    a = as_tensor(a)
    if a.shape[-1] < 1:
        raise ShapeError("softmax_lastdim: empty last dimension")
    x = a.data
    if mask is not None:
        x = np.where(mask, -np.inf, x)
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    s = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _make(s.astype(a.data.dtype, copy=False), (a,), "softmax", bw)


def layer_norm(a, gain, bias, eps=1e-5):
    a, gain, bias = as_tensor(a), as_tensor(gain), as_tensor(bias)
    d = a.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: gain/bias must be ({d},), got {gain.shape} and {bias.shape}")
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xhat = xc * inv

    def bw(g):
        gx = ggain = gbias = None
        if a.requires_grad:
            gh = g * gain.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        if gain.requires_grad:
            ggain = (g * xhat).reshape(-1, d).sum(axis=0)
        if bias.requires_grad:
            gbias = g.reshape(-1, d).sum(axis=0)
        return gx, ggain, gbias

    return _make(xhat * gain.data + bias.data, (a, gain, bias), "layer_norm", bw)


# ------------------------------------------------------------------- backward

def _topological(root):
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


def tape(root):
    """Recorded ops reachable from ``root`` in execution (topological) order."""
    return [n for n in _topological(root) if not n.is_leaf]


def backward(loss, grad=None):
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every leaf requiring grad."""
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tensor requiring grad")
    seed = np.ones_like(loss.data) if grad is None else np.asarray(grad, dtype=loss.data.dtype)
    grads = {id(loss): seed}
    for node in reversed(_topological(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.grad is None:
                node.grad = np.array(g, dtype=node.data.dtype, copy=True)
            else:
                node.grad = node.grad + g
            continue
        for p, pg in zip(node._parents, node._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            grads[key] = pg if key not in grads else grads[key] + pg
