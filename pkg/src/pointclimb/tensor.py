"""Dense float64 tensors with reverse-mode autodiff and an Adam optimizer.

Every differentiable operation returns a new :class:`Tensor` that remembers
its parents and a local backward rule. :func:`backward` walks the graph in
reverse topological order from a scalar root. Tensors on the graph are never
mutated in place; the optimizer rebinds ``data`` to fresh arrays.
"""
from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field

import numpy as np

from .exceptions import InvalidArgumentError, InvalidStateError

_state = threading.local()


def is_grad_enabled():
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (teacher inference, eval)."""
    prev = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad=False):
        arr = np.array(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise InvalidArgumentError("tensor data contains NaN or Inf")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self.op = None

    @classmethod
    def _from_op(cls, data, parents, backward, op):
        out = cls.__new__(cls)
        data = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(data)):
            raise InvalidArgumentError(f"non-finite values produced by {op}")
        out.data = data
        out.grad = None
        out.op = op
        track = is_grad_enabled() and any(p.requires_grad for p in parents)
        out.requires_grad = track
        out._parents = tuple(parents) if track else ()
        out._backward = backward if track else None
        return out

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}, op={self.op})"

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
        return self.data.copy()

    def item(self):
        return float(self.data.item())

    def detach(self):
        return Tensor(self.data)

    # operators -----------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum_reduce(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean_reduce(self, axis, keepdims)

    def max(self, axis=None, keepdims=False):
        return max_reduce(self, axis, keepdims)

    def relu(self):
        return relu(self)

    def log(self):
        return log(self)

    def exp(self):
        return exp(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


# elementwise -------------------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor._from_op(a.data + b.data, (a, b), bw, "add")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return Tensor._from_op(a.data * b.data, (a, b), bw, "mul")


def neg(a):
    return Tensor._from_op(-a.data, (a,), lambda g: (-g,), "neg")


def relu(a):
    mask = a.data > 0
    return Tensor._from_op(np.maximum(a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def log(a):
    if np.any(a.data <= 0):
        raise InvalidArgumentError("log of non-positive value")
    return Tensor._from_op(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def exp(a):
    out = np.exp(a.data)
    return Tensor._from_op(out, (a,), lambda g: (g * out,), "exp")


# linear algebra ----------------------------------------------------------

def matmul(a, b):
    """Batched matrix product; ``a`` is ``[..., n, d]`` and ``b`` ``[..., d, h]``.

    1-D operands are promoted the numpy way.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim == 1:
        return reshape(matmul(reshape(a, (1,) + a.shape), b), b.shape[:-2] + b.shape[-1:])
    if b.ndim == 1:
        return reshape(matmul(a, reshape(b, b.shape + (1,))), a.shape[:-1])
    if a.shape[-1] != b.shape[-2]:
        raise InvalidArgumentError(f"matmul shape mismatch {a.shape} @ {b.shape}")

    def bw(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            if b.ndim == 2:
                # one flat product instead of a broadcast stack summed afterwards
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    if b.ndim == 2 and a.ndim > 2:
        out = (a.data.reshape(-1, a.shape[-1]) @ b.data).reshape(a.shape[:-1] + b.shape[-1:])
    else:
        out = a.data @ b.data
    return Tensor._from_op(out, (a, b), bw, "matmul")


def column_matmul(x, w):
    """``x @ w`` computed one output column at a time.

    Each column is an independent matrix-vector product, so appending columns
    to ``w`` never changes the bits of the existing outputs (BLAS blocking in a
    full matmul does not give that guarantee).
    """
    x, w = as_tensor(x), as_tensor(w)
    if w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise InvalidArgumentError(f"column_matmul shape mismatch {x.shape} @ {w.shape}")
    cols = [x.data @ np.ascontiguousarray(w.data[:, j]) for j in range(w.shape[1])]
    out = np.stack(cols, axis=-1)

    def bw(g):
        gx = g @ w.data.T
        x2 = x.data.reshape(-1, x.shape[-1])
        gw = x2.T @ g.reshape(-1, w.shape[1])
        return gx, gw

    return Tensor._from_op(out, (x, w), bw, "column_matmul")


# shape ops ---------------------------------------------------------------

def reshape(a, shape):
    src = a.shape
    return Tensor._from_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),), "reshape")


def take(a, index):
    """Basic (slice / int) indexing."""
    out = a.data[index]

    def bw(g):
        full = np.zeros_like(a.data)
        full[index] = g
        return (full,)

    return Tensor._from_op(out.copy(), (a,), bw, "take")


def concatenate(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise InvalidArgumentError("concatenate needs at least one tensor")
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor._from_op(np.concatenate([t.data for t in tensors], axis=axis),
                           tuple(tensors), bw, "concatenate")


def gather(x, idx):
    """Gather rows along the point axis.

    ``x`` is ``[n, d]`` or ``[B, n, d]``; ``idx`` is an integer array whose
    leading axis is the batch axis when ``x`` is batched. The result has shape
    ``idx.shape + (d,)``.
    """
    idx = np.asarray(idx)
    if not np.issubdtype(idx.dtype, np.integer):
        raise InvalidArgumentError("gather indices must be integers")
    if x.ndim == 2:
        n, d = x.shape
        flat_idx = idx
        flat = x.data
    elif x.ndim == 3:
        bsz, n, d = x.shape
        if idx.shape[0] != bsz:
            raise InvalidArgumentError("gather batch size mismatch")
        offs = (np.arange(bsz) * n).reshape((bsz,) + (1,) * (idx.ndim - 1))
        flat_idx = idx + offs
        flat = x.data.reshape(bsz * n, d)
    else:
        raise InvalidArgumentError("gather expects a 2-D or 3-D tensor")
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise InvalidArgumentError("gather index out of range")

    def bw(g):
        acc = np.zeros_like(flat)
        np.add.at(acc, flat_idx.reshape(-1), g.reshape(-1, d))
        return (acc.reshape(x.shape),)

    return Tensor._from_op(flat[flat_idx], (x,), bw, "gather")


# reductions --------------------------------------------------------------

def _expand(g, shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(np.reshape(g, (1,) * len(shape)), shape)
    if not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def sum_reduce(a, axis=None, keepdims=False):
    return Tensor._from_op(a.data.sum(axis=axis, keepdims=keepdims), (a,),
                           lambda g: (_expand(g, a.shape, axis, keepdims).copy(),), "sum")


def mean_reduce(a, axis=None, keepdims=False):
    n = a.size if axis is None else a.shape[axis]
    return Tensor._from_op(a.data.mean(axis=axis, keepdims=keepdims), (a,),
                           lambda g: (_expand(g, a.shape, axis, keepdims) / n,), "mean")


def _first_argmax(x, axis):
    """Index of the first maximal entry along ``axis``, with the maxima (keepdims)."""
    if x.shape[axis] == 0:
        raise InvalidArgumentError("max over an empty axis")
    top = x.max(axis=axis, keepdims=True)
    return np.expand_dims(np.argmax(x == top, axis=axis), axis), top


def max_reduce(a, axis=None, keepdims=False):
    """Max over ``axis``; the gradient goes to the first maximal entry only."""
    if axis is None:
        flat = reshape(a, (-1,))
        return max_reduce(flat, 0, keepdims=False) if not keepdims else reshape(
            max_reduce(flat, 0), (1,) * a.ndim)
    axis = axis % a.ndim
    arg, out = _first_argmax(a.data, axis)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        full = np.zeros_like(a.data)
        np.put_along_axis(full, arg, g, axis=axis)
        return (full,)

    return Tensor._from_op(out if keepdims else np.squeeze(out, axis), (a,), bw, "max")


AGGREGATIONS = {"max": max_reduce, "mean": mean_reduce, "sum": sum_reduce}


def aggregate(a, kind, axis):
    """Symmetric reduction over the point axis."""
    try:
        fn = AGGREGATIONS[kind]
    except KeyError:
        raise InvalidArgumentError(f"unknown aggregation {kind!r}") from None
    return fn(a, axis)


# softmax family ----------------------------------------------------------

def _check_softmax_args(x, tau):
    if x.ndim == 0 or x.shape[-1] == 0:
        raise InvalidArgumentError("softmax needs at least one logit")
    if not tau > 0:
        raise InvalidArgumentError(f"temperature must be positive, got {tau}")


def _softmax_np(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_with_temperature(logits, tau=1.0):
    """Softmax of ``logits / tau`` over the last axis."""
    x = as_tensor(logits)
    _check_softmax_args(x, tau)
    s = _softmax_np(x.data / tau)

    def bw(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)) / tau,)

    return Tensor._from_op(s, (x,), bw, "softmax")


def log_softmax(logits, tau=1.0):
    """Log of :func:`softmax_with_temperature`, evaluated stably."""
    x = as_tensor(logits)
    _check_softmax_args(x, tau)
    z = x.data / tau
    z = z - z.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    s = np.exp(out)

    def bw(g):
        return ((g - s * g.sum(axis=-1, keepdims=True)) / tau,)

    return Tensor._from_op(out, (x,), bw, "log_softmax")


def nll(log_probs, labels):
    """Mean negative log-likelihood of integer ``labels`` under ``log_probs[N, C]``."""
    labels = np.asarray(labels)
    if log_probs.ndim != 2 or labels.shape != (log_probs.shape[0],):
        raise InvalidArgumentError("nll expects [N, C] log-probs and N labels")
    n, c = log_probs.shape
    if n == 0:
        raise InvalidArgumentError("nll needs a non-empty batch")
    if labels.min() < 0 or labels.max() >= c:
        raise InvalidArgumentError("label out of range")
    rows = np.arange(n)

    def bw(g):
        full = np.zeros((n, c))
        full[rows, labels] = -g / n
        return (full,)

    return Tensor._from_op(-log_probs.data[rows, labels].mean(), (log_probs,), bw, "nll")


def cross_entropy(logits, target_probs, tau=1.0):
    """Mean over rows of ``-sum(target * log softmax(logits / tau))``.

    ``target_probs`` is treated as a constant.
    """
    logits = as_tensor(logits)
    target = np.asarray(target_probs.data if isinstance(target_probs, Tensor) else target_probs,
                        dtype=np.float64)
    lp = log_softmax(logits, tau)
    if lp.ndim == 1:
        return neg(sum_reduce(mul(lp, target)))
    return neg(mean_reduce(sum_reduce(mul(lp, target), axis=-1)))


# backward ----------------------------------------------------------------

class GradientTape:
    """Operations reachable from a root, in topological order.

    Every node's inputs precede it in ``nodes``.
    """

    def __init__(self, root):
        if not isinstance(root, Tensor):
            raise InvalidArgumentError("backward root must be a Tensor")
        if root.size != 1:
            raise InvalidArgumentError(f"backward root must be scalar, got shape {root.shape}")
        if not root.requires_grad:
            raise InvalidStateError("root is not on the gradient tape")
        self.root = root
        self.nodes = self._toposort(root)

    @staticmethod
    def _toposort(root):
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

    def replay(self):
        grads = {id(self.root): np.ones_like(self.root.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                node.grad = g.copy()
                continue
            for p, pg in zip(node._parents, node._backward(g)):
                if not p.requires_grad:
                    continue
                if id(p) in grads:
                    grads[id(p)] = grads[id(p)] + pg
                else:
                    grads[id(p)] = np.asarray(pg, dtype=np.float64)
        return [n for n in self.nodes if n.is_leaf]


def backward(root, params=None):
    """Populate ``.grad`` on every requires-grad leaf reachable from ``root``.

    Leaves in ``params`` that the root does not depend on get a zero gradient.
    Returns the list of leaves that received gradients.
    """
    tape = GradientTape(root)
    if params is not None:
        for p in params:
            p.grad = np.zeros_like(p.data)
    return tape.replay()


# Adam --------------------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params, grads, state):
    """One bias-corrected Adam update.

    ``params`` are Tensors whose ``data`` is rebound to a new array; the
    moment buffers in ``state`` are created on the first call.
    """
    if len(params) != len(grads):
        raise InvalidArgumentError("params and grads differ in length")
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    if len(state.m) != len(params):
        raise InvalidArgumentError("optimizer state does not match params")
    for p, g, m in zip(params, grads, state.m):
        if np.shape(g) != p.shape or m.shape != p.shape:
            raise InvalidArgumentError(f"shape mismatch for parameter {p.shape}")
    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    for i, (p, g) in enumerate(zip(params, grads)):
        g = np.asarray(g, dtype=np.float64)
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g
        m_hat = state.m[i] / bc1
        v_hat = state.v[i] / bc2
        p.data = p.data - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return params, state


class Adam:
    """Thin stateful wrapper that reads ``p.grad`` off each parameter."""

    def __init__(self, params, lr=1e-4, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.state = AdamState(lr=lr, beta1=betas[0], beta2=betas[1], eps=eps)

    def step(self):
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        adam_step(self.params, grads, self.state)
