"""Dense float64 tensors with a dynamic reverse-mode tape.

Every op returns a new ``Tensor`` holding its parents and a closure that maps
the output gradient to one gradient per parent. ``backward`` collects the
nodes reachable from a scalar loss and runs the closures in reverse creation
order, so a tensor used twice receives the sum of both contributions.
"""
from __future__ import annotations

import itertools
import os
from typing import Callable, Iterable, Sequence

import numpy as np

_ids = itertools.count()


def _debug() -> bool:
    return os.environ.get("ADAACT_LOG", "").lower() == "debug"


class DimensionError(ValueError):
    pass


class DomainError(ValueError):
    pass


class StateError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_id", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if _debug() and not np.all(np.isfinite(arr)):
            raise DomainError(f"non-finite values in tensor {name or ''}")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._id = next(_ids)
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    @property
    def T(self):
        return transpose(self)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    """Record a node on the tape.

    ``backward(g)`` receives d(loss)/d(out) and returns a tuple with one
    gradient per parent (``None`` where nothing flows).
    """
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out._id = next(_ids)
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    if _debug() and not np.all(np.isfinite(data)):
        raise DomainError("non-finite values produced on the tape")
    return out


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")


# --------------------------------------------------------------------------- binary


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; ``b`` may also be a scalar or a row vector added to every row."""
    if a.shape == b.shape:
        return make(a.data + b.data, (a, b), lambda g: (g, g))
    if b.data.ndim == 0:
        return make(a.data + b.data, (a, b), lambda g: (g, g.sum()))
    if a.data.ndim == 0:
        return make(a.data + b.data, (a, b), lambda g: (g.sum(), g))
    if a.data.ndim == 2 and b.data.ndim == 1 and a.shape[1] == b.shape[0]:
        return make(a.data + b.data, (a, b), lambda g: (g, g.sum(axis=0)))
    raise DimensionError(f"add: shapes {a.shape} and {b.shape} are incompatible")


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape == b.shape:
        return make(a.data - b.data, (a, b), lambda g: (g, -g))
    if b.data.ndim == 0:
        return make(a.data - b.data, (a, b), lambda g: (g, -g.sum()))
    if a.data.ndim == 0:
        return make(a.data - b.data, (a, b), lambda g: (g.sum(), -g))
    raise DimensionError(f"sub: shapes {a.shape} and {b.shape} are incompatible")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    return make(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def scale(a: Tensor, c: float) -> Tensor:
    return make(a.data * c, (a,), lambda g: (g * c,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")

    def bw(g):
        return (g @ b.data.T if a.requires_grad else None,
                a.data.T @ g if b.requires_grad else None)
    return make(a.data @ b.data, (a, b), bw)


# --------------------------------------------------------------------------- unary


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return make(a.data * mask, (a,), lambda g: (g * mask,))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return make(y, (a,), lambda g: (g * (1.0 - y * y),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(a: Tensor) -> Tensor:
    y = _sigmoid(a.data)
    return make(y, (a,), lambda g: (g * y * (1.0 - y),))


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return make(y, (a,), lambda g: (g * y,))


def log(a: Tensor) -> Tensor:
    return make(np.log(a.data), (a,), lambda g: (g / a.data,))


_UNARY = {"relu": relu, "tanh": tanh, "sigmoid": sigmoid}
_BINARY = {"add": add, "mul": mul}


def elementwise(op: str, a: Tensor, b: Tensor | None = None) -> Tensor:
    if op in _BINARY:
        if b is None:
            raise DimensionError(f"{op} needs two operands")
        _same_shape(a, b, op)
        return _BINARY[op](a, b)
    if op in _UNARY:
        return _UNARY[op](a)
    raise ValueError(f"unknown elementwise op {op!r}")


# --------------------------------------------------------------------------- reductions


def sum_all(a: Tensor) -> Tensor:
    return make(np.array(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, a.shape),))


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size
    return make(np.array(a.data.mean()), (a,), lambda g: (np.broadcast_to(g / n, a.shape),))


def lse_rows(x: np.ndarray) -> np.ndarray:
    """Row-wise logsumexp on a plain array (keepdims); rows of all -inf give -inf."""
    m = x.max(axis=-1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        return m + np.log(np.exp(x - m).sum(axis=-1, keepdims=True))


def softmax_rows(a: Tensor) -> Tensor:
    x = a.data
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    y = e / e.sum(axis=-1, keepdims=True)
    return make(y, (a,), lambda g: (y * (g - (g * y).sum(axis=-1, keepdims=True)),))


def log_softmax_rows(a: Tensor) -> Tensor:
    y = a.data - lse_rows(a.data)
    p = np.exp(y)
    return make(y, (a,), lambda g: (g - p * g.sum(axis=-1, keepdims=True),))


def logsumexp(a: Tensor) -> Tensor:
    """log(sum(exp(a))) over every element, shifted by the max."""
    if a.data.size == 0:
        raise DomainError("logsumexp of an empty tensor")
    x = a.data.ravel()
    m = x.max()
    if not np.isfinite(m):
        val, w = m, np.zeros_like(x)
    else:
        val = m + np.log(np.exp(x - m).sum())
        w = np.exp(x - val)
    return make(np.array(val), (a,), lambda g: ((g * w).reshape(a.shape),))


def layernorm(a: Tensor, gain: Tensor, shift: Tensor, eps: float = 1e-5) -> Tensor:
    x = a.data
    if x.ndim != 2 or x.shape[1] < 2:
        raise DimensionError("layernorm needs an M x N input with N >= 2")
    n = x.shape[1]
    xc = x - x.mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=1, keepdims=True) + eps)
    xhat = xc * inv

    def bw(g):
        gx = g * gain.data
        dx = inv / n * (n * gx - gx.sum(axis=1, keepdims=True)
                        - xhat * (gx * xhat).sum(axis=1, keepdims=True))
        return dx, (g * xhat).sum(axis=0), g.sum(axis=0)
    return make(xhat * gain.data + shift.data, (a, gain, shift), bw)


# --------------------------------------------------------------------------- shape


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    return make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor) -> Tensor:
    return make(a.data.T.copy(), (a,), lambda g: (g.T,))


def _is_basic(idx) -> bool:
    parts = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(p, (slice, int)) for p in parts)


def getitem(a: Tensor, idx) -> Tensor:
    basic = _is_basic(idx)

    def bw(g):
        full = np.zeros_like(a.data)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)
    return make(np.array(a.data[idx]), (a,), bw)


def concat(ts: Sequence[Tensor], axis: int = 0) -> Tensor:
    cuts = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return make(np.concatenate([t.data for t in ts], axis=axis), tuple(ts),
                lambda g: tuple(np.split(g, cuts, axis=axis)))


def stack(ts: Sequence[Tensor]) -> Tensor:
    return make(np.stack([t.data for t in ts]), tuple(ts),
                lambda g: tuple(g[i] for i in range(len(ts))))


def select_rows(mask: np.ndarray, a: Tensor, b: Tensor) -> Tensor:
    """Rows where ``mask`` is true come from ``a``, the rest from ``b``."""
    _same_shape(a, b, "select_rows")
    m = np.asarray(mask, dtype=bool).reshape(-1, *([1] * (a.data.ndim - 1)))
    return make(np.where(m, a.data, b.data), (a, b),
                lambda g: (np.where(m, g, 0.0), np.where(m, 0.0, g)))


# --------------------------------------------------------------------------- tape


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every requires_grad leaf reachable from ``loss``.

    Repeated calls accumulate into the leaves.
    """
    if loss.data.size != 1:
        raise DomainError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    nodes: dict[int, Tensor] = {}
    todo = [loss]
    while todo:
        n = todo.pop()
        if n._id in nodes:
            continue
        nodes[n._id] = n
        todo.extend(p for p in n._parents if p.requires_grad)

    grads: dict[int, np.ndarray] = {loss._id: np.ones_like(loss.data)}
    for nid in sorted(nodes, reverse=True):
        node = nodes[nid]
        g = grads.pop(nid, None)
        if g is None:
            continue
        if node._backward is None:
            g = np.array(g, dtype=np.float64).reshape(node.shape)
            node.grad = g if node.grad is None else node.grad + g
            continue
        for p, pg in zip(node._parents, node._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            if p._id in grads:
                grads[p._id] = grads[p._id] + pg
            else:
                grads[p._id] = pg


def sgd_step(params: Iterable[Tensor], lr: float) -> None:
    """Plain gradient descent; zeroes the gradients afterwards."""
    params = list(params)
    for p in params:
        if p.grad is None:
            raise StateError(f"parameter {p.name or p._id} has no gradient")
    for p in params:
        p.data = p.data - lr * p.grad
        p.grad = None


def gradcheck(
    fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    h: float = 1e-5,
    coords: int | None = None,
    rng: np.random.Generator | None = None,
    floor: float = 1e-4,
) -> float:
    """Worst relative error between tape gradients and central differences.

    ``coords`` samples that many entries per tensor instead of checking all
    of them. Relative error is ``|a - n| / max(|a|, |n|, floor)``.
    """
    rng = rng or np.random.default_rng(0)
    for p in params:
        p.grad = None
    backward(fn())
    analytic = [np.zeros(p.shape) if p.grad is None else p.grad.copy() for p in params]
    for p in params:
        p.grad = None
    worst = 0.0
    for p, ga in zip(params, analytic):
        flat = p.data.reshape(-1)
        idxs = np.arange(flat.size)
        if coords is not None and coords < flat.size:
            idxs = rng.choice(flat.size, coords, replace=False)
        for i in idxs:
            old = flat[i]
            flat[i] = old + h
            fp = fn().item()
            flat[i] = old - h
            fm = fn().item()
            flat[i] = old
            num = (fp - fm) / (2 * h)
            a = ga.reshape(-1)[i]
            worst = max(worst, abs(a - num) / max(abs(a), abs(num), floor))
    return worst
