"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations are recorded only while a :class:`Tape` is active and at least one
input requires a gradient; outside a tape every op is a plain numpy
evaluation. ``finite_diff`` is the central-difference oracle used by the
test-suite to validate every backward rule.

    with Tape() as tape:
        loss = tsum(square(x))
    grads = backward(loss)     # {x: 2 * x.data}
"""
import threading
from contextlib import contextmanager

import numpy as np

from .errors import DomainError, NonScalarLoss, NoActiveTape, ShapeMismatch

DEFAULT_NORM_EPS = 1e-12

_local = threading.local()


def _stack():
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape():
    stack = _stack()
    return stack[-1] if stack else None


@contextmanager
def no_tape():
    """Suspend recording inside an active tape (evaluation passes)."""
    stack = _stack()
    stack.append(None)
    try:
        yield
    finally:
        stack.pop()


class Node:
    __slots__ = ("tape", "out", "parents", "backward")

    def __init__(self, tape, out, parents, backward):
        self.tape = tape
        self.out = out
        self.parents = parents
        self.backward = backward


class Tape:
    """Append-only record of differentiable operations.

    Nodes are appended as ops execute, so parents always precede children and
    a single reversed sweep visits every node once.
    """

    def __init__(self):
        self.nodes = []

    def __enter__(self):
        _stack().append(self)
        return self

    def __exit__(self, *exc):
        _stack().pop()
        return False

    def record(self, out, parents, backward):
        node = Node(self, out, parents, backward)
        out._node = node
        self.nodes.append(node)

    def backward(self, loss):
        if loss.data.size != 1:
            raise NonScalarLoss(f"loss must be scalar, got shape {loss.shape}")
        grads = {id(loss): np.ones_like(loss.data)}
        leaves = {}
        for node in reversed(self.nodes):
            g = grads.get(id(node.out))
            if g is None:
                continue
            node.out.grad = g
            for parent, pg in zip(node.parents, node.backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
                if parent._node is None:
                    leaves[key] = parent
        out = {}
        for key, leaf in leaves.items():
            leaf.grad = grads[key]
            out[leaf] = leaf.grad
        return out


def backward(loss):
    """Run reverse mode from a scalar ``loss``; returns ``{leaf: gradient}``."""
    if not isinstance(loss, Tensor) or loss.data.size != 1:
        shape = getattr(loss, "shape", ())
        raise NonScalarLoss(f"loss must be a scalar tensor, got shape {shape}")
    if loss._node is None:
        raise NoActiveTape("loss was not produced under an active tape")
    return loss._node.tape.backward(loss)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_node", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = None
        self._node = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __len__(self):
        return len(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self):
        return self.data

    def detach(self):
        return Tensor(self.data)

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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, parents, backward_fn):
    tape = active_tape()
    req = tape is not None and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=req)
    if req:
        tape.record(out, parents, backward_fn)
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast(a, b, op):
    try:
        return op(a.data, b.data)
    except ValueError as exc:
        raise ShapeMismatch(f"cannot combine shapes {a.shape} and {b.shape}") from exc


# --- elementwise binary -------------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = _broadcast(a, b, np.add)
    return _result(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = _broadcast(a, b, np.subtract)
    return _result(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = _broadcast(a, b, np.multiply)
    return _result(out, (a, b), lambda g: (_unbroadcast(g * b.data, a.shape),
                                           _unbroadcast(g * a.data, b.shape)))


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = _broadcast(a, b, np.divide)

    def bw(g):
        ga = g / b.data
        return _unbroadcast(ga, a.shape), _unbroadcast(-ga * out, b.shape)

    return _result(out, (a, b), bw)


def scale(x, c):
    """Multiply by a constant scalar."""
    x = as_tensor(x)
    c = float(c)
    return _result(x.data * c, (x,), lambda g: (g * c,))


def neg(x):
    x = as_tensor(x)
    return _result(-x.data, (x,), lambda g: (-g,))


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul of {a.shape} and {b.shape}")
    out = a.data @ b.data
    return _result(out, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


# --- elementwise unary ----------------------------------------------------------

def maximum(x, c):
    """Elementwise max with a constant; gradient is 0 where ``x == c``."""
    x = as_tensor(x)
    keep = x.data > c
    return _result(np.where(keep, x.data, c), (x,), lambda g: (g * keep,))


def minimum(x, c):
    x = as_tensor(x)
    keep = x.data < c
    return _result(np.where(keep, x.data, c), (x,), lambda g: (g * keep,))


def clamp(x, lo, hi):
    return minimum(maximum(x, lo), hi)


def relu(x):
    return maximum(x, 0.0)


def hinge(x):
    """``[x]_+``; the subgradient at exactly zero is 0."""
    return maximum(x, 0.0)


def leaky_relu(x, slope=0.2):
    x = as_tensor(x)
    pos = x.data > 0
    factor = np.where(pos, 1.0, slope)
    return _result(x.data * factor, (x,), lambda g: (g * factor,))


def tanh(x):
    x = as_tensor(x)
    out = np.tanh(x.data)
    return _result(out, (x,), lambda g: (g * (1.0 - out * out),))


def sigmoid(x):
    x = as_tensor(x)
    out = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _result(out, (x,), lambda g: (g * out * (1.0 - out),))


def log(x):
    x = as_tensor(x)
    if not np.all(x.data > 0):
        raise DomainError("log of a non-positive value")
    return _result(np.log(x.data), (x,), lambda g: (g / x.data,))


def square(x):
    x = as_tensor(x)
    return _result(x.data * x.data, (x,), lambda g: (2.0 * g * x.data,))


# --- reductions and structure ---------------------------------------------------

def tsum(x, axis=None, keepdims=False):
    x = as_tensor(x)
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _result(out, (x,), bw)


def mean(x, axis=None, keepdims=False):
    x = as_tensor(x)
    n = x.data.size if axis is None else x.shape[axis]
    return scale(tsum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def euclidean_norm(x, axis=-1, eps=DEFAULT_NORM_EPS, keepdims=False):
    """``sqrt(sum(x**2) + eps)`` along ``axis``; ``eps`` keeps the origin differentiable."""
    x = as_tensor(x)
    out = np.sqrt(np.sum(x.data * x.data, axis=axis, keepdims=keepdims) + eps)

    def bw(g):
        o = out
        if not keepdims:
            g = np.expand_dims(g, axis)
            o = np.expand_dims(out, axis)
        return (g * x.data / o,)

    return _result(out, (x,), bw)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeMismatch(str(exc)) from exc
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _result(out, tuple(tensors), lambda g: tuple(np.split(g, bounds, axis=axis)))


def take(x, index):
    """Gather rows ``x[index]``; repeated indices accumulate in backward."""
    x = as_tensor(x)
    index = np.asarray(index, dtype=np.int64)

    def bw(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, index, g)
        return (gx,)

    return _result(x.data[index], (x,), bw)


def reshape(x, shape):
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeMismatch(str(exc)) from exc
    return _result(out, (x,), lambda g: (g.reshape(x.shape),))


def one_hot_embed(indices, k):
    """Constant ``len(indices) x k`` one-hot matrix."""
    indices = np.asarray(indices, dtype=np.int64).reshape(-1)
    if np.any(indices < 0) or np.any(indices >= k):
        raise ShapeMismatch(f"label index outside [0, {k})")
    out = np.zeros((len(indices), k))
    out[np.arange(len(indices)), indices] = 1.0
    return Tensor(out)


# --- oracle ---------------------------------------------------------------------

def finite_diff(loss_fn, params, step=1e-6):
    """Central-difference gradient of ``loss_fn()`` w.r.t. each tensor in ``params``.

    ``loss_fn`` is evaluated with recording suspended and must read the
    parameters' current ``data`` (they are perturbed in place and restored).
    """
    if step <= 0:
        raise ValueError("step must be positive")

    def f():
        with no_tape():
            v = loss_fn()
        return float(v.data) if isinstance(v, Tensor) else float(v)

    out = {}
    for p in params:
        g = np.zeros_like(p.data)
        flat, gflat = p.data.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = f()
            flat[i] = orig - step
            fm = f()
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * step)
        out[p] = g
    return out
