"""Dense float64 tensors with tape-style reverse-mode differentiation.

Every op builds a node holding its parents and a closure that maps the
upstream gradient to one gradient per parent. ``backward`` walks the graph
in reverse topological order. Intermediate gradients live only for the
duration of a single ``backward`` call, so the same graph can be
differentiated repeatedly (one pass per Jacobian row, say). Leaf gradients
accumulate across calls until ``zero_grad`` is called.
"""

from __future__ import annotations

import numpy as np

from ..errors import ContractError, NumericalError, ShapeError

__all__ = [
    "Tensor",
    "as_tensor",
    "matmul",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "scale",
    "affine",
    "relu",
    "tanh",
    "sigmoid",
    "exp",
    "softplus",
    "logsumexp",
    "softmax",
    "log_softmax",
    "gather",
    "take_cols",
    "sum",
    "mean",
    "l2_norm",
    "reshape",
    "cross_entropy",
    "backward",
    "zero_grad",
]


def _check_finite(op, arr):
    if not np.all(np.isfinite(arr)):
        raise NumericalError(f"{op}: non-finite value in output")
    return arr


class Tensor:
    """A float64 array with an optional gradient and graph bookkeeping."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_grad_fn", "op")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, _parents=(), _grad_fn=None, op="leaf"):
        arr = np.array(data, dtype=np.float64, copy=True) if not isinstance(data, np.ndarray) \
            else np.ascontiguousarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        _check_finite(op, arr)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._grad_fn = _grad_fn
        self.op = op

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def is_leaf(self):
        return not self._parents

    def numpy(self):
        return self.data

    def item(self):
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self):
        return Tensor(self.data.copy())

    def zero_grad(self):
        self.grad = None

    def backward(self, grad=None):
        backward(self, grad)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __len__(self):
        return self.data.shape[0]

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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return _index(self, idx)

    @property
    def T(self):
        return _transpose(self)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(op, data, parents, grad_fn):
    parents = tuple(parents)
    needs = any(p.requires_grad for p in parents)
    _check_finite(op, data)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = needs
    out._parents = parents if needs else ()
    out._grad_fn = grad_fn if needs else None
    out.op = op
    return out


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    ndiff = grad.ndim - len(shape)
    if ndiff > 0:
        grad = grad.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# -- elementwise -------------------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make("add", a.data + b.data, (a, b), grad_fn)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make("sub", a.data - b.data, (a, b), grad_fn)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)

    def grad_fn(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make("mul", a.data * b.data, (a, b), grad_fn)


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a, b)
    if np.any(b.data == 0):
        raise NumericalError("div: division by zero")
    q = a.data / b.data

    def grad_fn(g):
        return _unbroadcast(g / b.data, a.shape), _unbroadcast(-g * q / b.data, b.shape)

    return _make("div", q, (a, b), grad_fn)


def neg(a):
    return scale(a, -1.0)


def scale(a, c):
    """Multiply by a python scalar constant."""
    a = as_tensor(a)
    c = float(c)
    return _make("scale", a.data * c, (a,), lambda g: (g * c,))


def relu(a):
    a = as_tensor(a)
    mask = a.data > 0
    return _make("relu", np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def tanh(a):
    a = as_tensor(a)
    t = np.tanh(a.data)
    return _make("tanh", t, (a,), lambda g: (g * (1.0 - t * t),))


def sigmoid(a):
    a = as_tensor(a)
    x = a.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    s = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _make("sigmoid", s, (a,), lambda g: (g * s * (1.0 - s),))


def softplus(a):
    """log(1 + e^x), computed without overflow."""
    a = as_tensor(a)
    x = a.data
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    e = np.exp(-np.abs(x))
    s = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _make("softplus", out, (a,), lambda g: (g * s,))


def exp(a):
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        e = np.exp(a.data)
    return _make("exp", e, (a,), lambda g: (g * e,))


# -- linear algebra ----------------------------------------------------------

def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)

    def grad_fn(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    return _make("matmul", a.data @ b.data, (a, b), grad_fn)


def affine(x, weight, bias):
    """``x @ weight + bias`` for x (n, d_in), weight (d_in, d_out), bias (d_out,)."""
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ShapeError("affine", x.shape, weight.shape)
    if bias.shape != (weight.shape[1],):
        raise ShapeError("affine", weight.shape, bias.shape, detail="bias")

    def grad_fn(g):
        gx = g @ weight.data.T if x.requires_grad else None
        gw = x.data.T @ g if weight.requires_grad else None
        gb = g.sum(axis=0) if bias.requires_grad else None
        return gx, gw, gb

    return _make("affine", x.data @ weight.data + bias.data, (x, weight, bias), grad_fn)


def _transpose(a):
    if a.ndim != 2:
        raise ShapeError("transpose", a.shape)
    return _make("transpose", np.ascontiguousarray(a.data.T), (a,), lambda g: (g.T,))


def reshape(a, shape):
    a = as_tensor(a)
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", old, shape) from None
    return _make("reshape", out, (a,), lambda g: (g.reshape(old),))


# -- reductions --------------------------------------------------------------

def _norm_axis(a, axis):
    if axis is None:
        return None
    return axis % a.ndim if a.ndim else axis


def sum(a, axis=None):  # noqa: A001 - mirrors numpy naming
    a = as_tensor(a)
    axis = _norm_axis(a, axis)
    shape = a.shape

    def grad_fn(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make("sum", np.asarray(a.data.sum(axis=axis)), (a,), grad_fn)


def mean(a, axis=None):
    a = as_tensor(a)
    axis = _norm_axis(a, axis)
    n = a.data.size if axis is None else a.shape[axis]
    shape = a.shape

    def grad_fn(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, shape).copy(),)

    return _make("mean", np.asarray(a.data.mean(axis=axis)), (a,), grad_fn)


def logsumexp(a, axis=-1):
    """Max-shifted log-sum-exp along ``axis``; never overflows for finite input."""
    a = as_tensor(a)
    axis = _norm_axis(a, axis)
    m = a.data.max(axis=axis, keepdims=True)
    e = np.exp(a.data - m)
    s = e.sum(axis=axis, keepdims=True)
    out = (np.log(s) + m).squeeze(axis)
    sm = e / s

    def grad_fn(g):
        return (np.expand_dims(g, axis) * sm,)

    return _make("logsumexp", out, (a,), grad_fn)


def softmax(a, axis=-1):
    a = as_tensor(a)
    axis = _norm_axis(a, axis)
    e = np.exp(a.data - a.data.max(axis=axis, keepdims=True))
    s = e / e.sum(axis=axis, keepdims=True)

    def grad_fn(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _make("softmax", s, (a,), grad_fn)


def log_softmax(a, axis=-1):
    a = as_tensor(a)
    axis = _norm_axis(a, axis)
    m = a.data.max(axis=axis, keepdims=True)
    shifted = a.data - m
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    s = np.exp(out)

    def grad_fn(g):
        return (g - s * g.sum(axis=axis, keepdims=True),)

    return _make("log_softmax", out, (a,), grad_fn)


def l2_norm(a, axis=-1):
    """Euclidean norm along ``axis``. Zero vectors are a domain error."""
    a = as_tensor(a)
    axis = _norm_axis(a, axis)
    n = np.sqrt((a.data * a.data).sum(axis=axis))
    if np.any(n == 0):
        raise NumericalError("l2_norm: zero-norm vector has no gradient")

    def grad_fn(g):
        return (np.expand_dims(g / n, axis) * a.data,)

    return _make("l2_norm", n, (a,), grad_fn)


# -- indexing ----------------------------------------------------------------

def gather(a, index):
    """Row-wise pick: ``out[i] = a[i, index[i]]`` for a 2-D tensor."""
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.int64)
    if a.ndim != 2 or index.shape != (a.shape[0],):
        raise ShapeError("gather", a.shape, index.shape)
    if np.any(index < 0) or np.any(index >= a.shape[1]):
        raise ContractError(f"gather: index out of range for {a.shape[1]} columns")
    rows = np.arange(a.shape[0])

    def grad_fn(g):
        out = np.zeros(a.shape)
        out[rows, index] = g
        return (out,)

    return _make("gather", a.data[rows, index].copy(), (a,), grad_fn)


def take_cols(a, start, stop):
    """Columns ``start:stop`` of a 2-D tensor."""
    a = as_tensor(a)
    if a.ndim != 2 or not 0 <= start < stop <= a.shape[1]:
        raise ShapeError("take_cols", a.shape, (start, stop))

    def grad_fn(g):
        out = np.zeros(a.shape)
        out[:, start:stop] = g
        return (out,)

    return _make("take_cols", a.data[:, start:stop].copy(), (a,), grad_fn)


def _index(a, idx):
    shape = a.shape

    def grad_fn(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)

    return _make("index", np.array(a.data[idx], dtype=np.float64), (a,), grad_fn)


# -- composites --------------------------------------------------------------

def cross_entropy(logits, targets):
    """Mean negative log-likelihood of integer ``targets`` under softmax(logits)."""
    logits = as_tensor(logits)
    targets = np.broadcast_to(np.asarray(targets, dtype=np.int64), (logits.shape[0],))
    return mean(sub(logsumexp(logits, axis=1), gather(logits, targets)))


# -- differentiation ---------------------------------------------------------

def _topo(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
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


def backward(loss, grad=None):
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every grad-requiring leaf.

    ``loss`` must be a scalar unless an explicit upstream ``grad`` is given.
    """
    if grad is None:
        if loss.data.size != 1:
            raise ContractError(f"backward on non-scalar tensor of shape {loss.shape}")
        grad = np.ones(loss.shape)
    else:
        grad = np.asarray(grad, dtype=np.float64)
        if grad.shape != loss.shape:
            raise ShapeError("backward", loss.shape, grad.shape)
    if not loss.requires_grad:
        return
    grads = {id(loss): grad}
    for node in reversed(_topo(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._grad_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            prev = grads.get(id(parent))
            grads[id(parent)] = pg if prev is None else prev + pg


def zero_grad(params):
    for p in params:
        p.grad = None
