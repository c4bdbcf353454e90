"""Dense tensors with tape-style reverse-mode differentiation.

Every operation producing a tensor that depends on a ``requires_grad`` operand
gets a sequence number from a global counter; ``backward`` walks the reachable
nodes in decreasing sequence order, which is the reverse of the order in which
they were appended. A graph is consumed by ``backward`` and cannot be replayed.
"""

from __future__ import annotations

import itertools
from typing import Callable, Iterable, Sequence

import numpy as np

LOG_EPS = 1e-6
SQRT_GRAD_EPS = 1e-12

_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))
_seq = itertools.count(1)


class GraphError(RuntimeError):
    """Raised for misuse of the differentiation graph."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_seq", "_consumed")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _DTYPES:
            arr = arr.astype(np.float64 if dtype is None else dtype)
        if arr.size == 0:
            raise ValueError("tensors must be non-empty")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._seq = 0
        self._consumed = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"expected a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __float__(self) -> float:
        return self.item()

    def detach(self) -> Tensor:
        return Tensor(self.data, requires_grad=False)

    def astype(self, dtype) -> Tensor:
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, other):
        return add(self, other) if isinstance(other, Tensor) else add_scalar(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other) if isinstance(other, Tensor) else add_scalar(self, -other)

    def __rsub__(self, other):
        return add_scalar(scale(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Tensor) else scale(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other) if isinstance(other, Tensor) else scale(self, 1.0 / other)

    def __neg__(self):
        return scale(self, -1.0)

    def __getitem__(self, index):
        return take(self, index)

    def sum(self, axis=None):
        return sum_(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def backward(self) -> None:
        backward(self)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _check_dtypes(*tensors: Tensor) -> np.dtype:
    dt = tensors[0].dtype
    for t in tensors[1:]:
        if t.dtype != dt:
            raise TypeError(f"mixed precision in one graph: {dt} and {t.dtype}")
    return dt


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def make_node(data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    """Wrap ``data`` as the output of an operation on ``parents``.

    ``backward_fn(grad_out)`` must return one gradient (or None) per parent.
    No node is recorded when no parent requires a gradient.
    """
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
        out._seq = next(_seq)
    return out


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every ``requires_grad`` leaf reachable from ``loss``."""
    if loss.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad or loss.is_leaf:
        raise GraphError("loss is detached from any recorded graph")
    if loss._consumed:
        raise GraphError("graph already consumed by a previous backward call; rebuild it")

    nodes: dict[int, Tensor] = {}
    leaves: dict[int, Tensor] = {}
    stack = [loss]
    while stack:
        t = stack.pop()
        if t.is_leaf:
            if t.requires_grad:
                leaves[id(t)] = t
            continue
        if id(t) in nodes:
            continue
        nodes[id(t)] = t
        stack.extend(p for p in t._parents if p.requires_grad)

    for leaf in leaves.values():
        leaf.grad = np.zeros_like(leaf.data)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}

    for node in sorted(nodes.values(), key=lambda n: n._seq, reverse=True):
        g = grads.pop(id(node), None)
        node._consumed = True
        if g is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if pg.shape != parent.shape:
                pg = pg.reshape(parent.shape)
            if parent.is_leaf:
                parent.grad += pg
            elif id(parent) in grads:
                grads[id(parent)] = grads[id(parent)] + pg
            else:
                grads[id(parent)] = pg


# -- elementwise -------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_dtypes(a, b)
    _check_same_shape(a, b, "add")
    return make_node(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_dtypes(a, b)
    _check_same_shape(a, b, "sub")
    return make_node(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_dtypes(a, b)
    _check_same_shape(a, b, "mul")
    return make_node(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_dtypes(a, b)
    _check_same_shape(a, b, "div")
    out = a.data / b.data
    return make_node(out, (a, b), lambda g: (g / b.data, -g * out / b.data))


def scale(a: Tensor, k: float) -> Tensor:
    k = a.dtype.type(k)
    return make_node(a.data * k, (a,), lambda g: (g * k,))


def add_scalar(a: Tensor, k: float) -> Tensor:
    return make_node(a.data + a.dtype.type(k), (a,), lambda g: (g,))


def log_offset(a: Tensor, eps: float = LOG_EPS) -> Tensor:
    """``ln(a + eps)``."""
    shifted = a.data + a.dtype.type(eps)
    if np.any(shifted <= 0):
        raise ValueError(f"log_offset: x + eps must be positive (min {shifted.min()!r})")
    return make_node(np.log(shifted), (a,), lambda g: (g / shifted,))


def clamp(a: Tensor, lo: float | None = None, hi: float | None = None) -> Tensor:
    out = np.clip(a.data, lo, hi)
    inside = np.ones(a.shape, dtype=bool)
    if lo is not None:
        inside &= a.data >= lo
    if hi is not None:
        inside &= a.data <= hi
    return make_node(out, (a,), lambda g: (g * inside,))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # split by sign so neither branch overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return make_node(out, (a,), lambda g: (g * out * (1.0 - out),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return make_node(a.data * mask, (a,), lambda g: (g * mask,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return make_node(out, (a,), lambda g: (g * (1.0 - out * out),))


def sqrt(a: Tensor, grad_eps: float = SQRT_GRAD_EPS) -> Tensor:
    """Exact square root forward; the backward uses ``sqrt(x + grad_eps)``."""
    if np.any(a.data < 0):
        raise ValueError("sqrt of negative value")
    out = np.sqrt(a.data)
    denom = 2.0 * np.sqrt(a.data + a.dtype.type(grad_eps))
    return make_node(out, (a,), lambda g: (g / denom,))


# -- reductions and shape ----------------------------------------------------


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum_(a: Tensor, axis=None) -> Tensor:
    axes = _norm_axis(axis, a.data.ndim)
    out = a.data.sum(axis=axes)
    kept = tuple(1 if i in axes else n for i, n in enumerate(a.shape))
    return make_node(np.asarray(out), (a,), lambda g: (np.broadcast_to(g.reshape(kept), a.shape).copy(),))


def mean(a: Tensor, axis=None) -> Tensor:
    axes = _norm_axis(axis, a.data.ndim)
    count = int(np.prod([a.shape[i] for i in axes]))
    return scale(sum_(a, axes), 1.0 / count)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    return make_node(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes=None) -> Tensor:
    out = np.transpose(a.data, axes)
    inv = np.argsort(axes) if axes is not None else None
    return make_node(out, (a,), lambda g: (np.transpose(g, inv),))


def take(a: Tensor, index) -> Tensor:
    """Basic (slice/int) indexing."""
    out = a.data[index]

    def bw(g):
        full = np.zeros_like(a.data)
        full[index] = g
        return (full,)

    return make_node(np.array(out), (a,), bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    _check_dtypes(*tensors)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return make_node(out, tuple(tensors), lambda g: tuple(np.split(g, bounds, axis=axis)))


def broadcast_to(a: Tensor, shape) -> Tensor:
    """Explicit broadcast; the only way a tensor gets expanded."""
    shape = tuple(shape)
    lead = len(shape) - a.data.ndim
    if lead < 0:
        raise ValueError(f"cannot broadcast {a.shape} to {shape}")
    axes = tuple(range(lead)) + tuple(
        lead + i for i, n in enumerate(a.shape) if n == 1 and shape[lead + i] != 1
    )
    out = np.broadcast_to(a.data, shape).copy()
    return make_node(out, (a,), lambda g: (g.sum(axis=axes, keepdims=True).reshape(a.shape),))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    _check_dtypes(a, b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    return make_node(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


# -- gradient checking -------------------------------------------------------


def numerical_grad(fn: Callable[[], Tensor], t: Tensor, indices: Iterable[int], step: float = 1e-6) -> np.ndarray:
    flat = t.data.reshape(-1)
    out = []
    for i in indices:
        orig = flat[i]
        flat[i] = orig + step
        fp = fn().item()
        flat[i] = orig - step
        fm = fn().item()
        flat[i] = orig
        out.append((fp - fm) / (2 * step))
    return np.array(out)


def gradcheck(
    fn: Callable[[], Tensor],
    inputs: Sequence[Tensor],
    step: float = 1e-6,
    rtol: float = 1e-4,
    atol: float = 1e-8,
    max_elements: int | None = None,
    seed: int = 0,
) -> float:
    """Compare backward against central differences on 64-bit inputs.

    ``fn`` rebuilds the graph from the (mutated in place) ``inputs`` on each
    call. When ``max_elements`` is given, a seeded random subset of each
    input's elements is probed. Returns the worst ``|a - n| / (atol + rtol|n|)``;
    raises AssertionError if it exceeds 1.
    """
    for t in inputs:
        if t.dtype != np.float64:
            raise TypeError("gradcheck needs float64 inputs")
    loss = fn()
    loss.backward()
    analytic = [t.grad.copy() for t in inputs]
    rng = np.random.default_rng(seed)
    worst = 0.0
    for k, t in enumerate(inputs):
        n = t.size
        if max_elements is not None and n > max_elements:
            idx = np.sort(rng.choice(n, size=max_elements, replace=False))
        else:
            idx = np.arange(n)
        num = numerical_grad(fn, t, idx, step)
        ana = analytic[k].reshape(-1)[idx]
        ratio = np.abs(ana - num) / (atol + rtol * np.abs(num))
        r = float(ratio.max())
        if r > 1.0:
            j = int(ratio.argmax())
            raise AssertionError(
                f"gradient mismatch on input {k} element {int(idx[j])}: analytic {ana[j]!r}, numerical {num[j]!r}"
            )
        worst = max(worst, r)
    return worst
