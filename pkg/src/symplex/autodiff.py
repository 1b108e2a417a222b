"""A small define-by-run reverse-mode autodiff engine over numpy arrays.

Only the operations the policy network needs are provided. Everything runs
in float64.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class BackwardError(RuntimeError):
    pass


class DiffArray:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_used", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[DiffArray, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self._used = False
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __repr__(self):
        return f"DiffArray(shape={self.shape}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g: np.ndarray):
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad = self.grad + g

    # -- graph traversal -------------------------------------------------

    def backward(self):
        if self.data.size != 1:
            raise BackwardError(f"backward needs a scalar loss, got shape {self.shape}")
        if self._used:
            raise BackwardError("backward already called on this graph")
        self._used = True

        order: list[DiffArray] = []
        seen: set[int] = set()
        stack: list[tuple[DiffArray, bool]] = [(self, False)]
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

        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node._accumulate(g)
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                prev = grads.get(id(parent))
                grads[id(parent)] = pg if prev is None else prev + pg

    # -- operator sugar --------------------------------------------------

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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def parameter(data, name: str | None = None) -> DiffArray:
    return DiffArray(np.array(data, dtype=np.float64), requires_grad=True, name=name)


def as_array(x) -> DiffArray:
    return x if isinstance(x, DiffArray) else DiffArray(x)


def _result(data, parents: Sequence[DiffArray], backward) -> DiffArray:
    out = DiffArray(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_broadcast(a: np.ndarray, b: np.ndarray, op: str):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> DiffArray:
    a, b = as_array(a), as_array(b)
    _check_broadcast(a.data, b.data, "add")
    return _result(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> DiffArray:
    a, b = as_array(a), as_array(b)
    _check_broadcast(a.data, b.data, "sub")
    return _result(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> DiffArray:
    a, b = as_array(a), as_array(b)
    _check_broadcast(a.data, b.data, "mul")
    return _result(
        a.data * b.data,
        (a, b),
        lambda g: (
            _unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
            _unbroadcast(g * a.data, b.shape) if b.requires_grad else None,
        ),
    )


def relu(a: DiffArray) -> DiffArray:
    mask = a.data > 0
    return _result(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def exp(a: DiffArray) -> DiffArray:
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,))


def log(a: DiffArray) -> DiffArray:
    return _result(np.log(a.data), (a,), lambda g: (g / a.data,))


# ---------------------------------------------------------------------------
# shape and linear algebra


def matmul(a, b) -> DiffArray:
    a, b = as_array(a), as_array(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul needs operands with at least 2 dimensions")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(a.data @ b.data, (a, b), backward)


def transpose(a: DiffArray, axes: Sequence[int]) -> DiffArray:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _result(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),))


def reshape(a: DiffArray, shape: Sequence[int]) -> DiffArray:
    old = a.shape
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def gather_rows(table: DiffArray, index: np.ndarray) -> DiffArray:
    """Embedding lookup: ``table[index]`` with scatter-add backward."""
    index = np.asarray(index, dtype=np.int64)

    def backward(g):
        out = np.zeros_like(table.data)
        np.add.at(out, index.reshape(-1), g.reshape(-1, table.shape[-1]))
        return (out,)

    return _result(table.data[index], (table,), backward)


def take_along_last(a: DiffArray, index: np.ndarray) -> DiffArray:
    """``out[..., j] = a[..., index[..., j]]`` with broadcasting of leading dims."""
    index = np.asarray(index, dtype=np.int64)
    lead = np.broadcast_shapes(a.shape[:-1], index.shape[:-1])
    src = np.broadcast_to(a.data, lead + a.shape[-1:])
    idx = np.broadcast_to(index, lead + index.shape[-1:])
    out = np.take_along_axis(src, idx, axis=-1)

    def backward(g):
        full = np.empty(lead + a.shape[-1:])
        for c in range(a.shape[-1]):
            full[..., c] = np.where(idx == c, g, 0.0).sum(axis=-1)
        return (_unbroadcast(full, a.shape),)

    return _result(out, (a,), backward)


# ---------------------------------------------------------------------------
# reductions and normalisations


def sum(a: DiffArray, axis=None, keepdims: bool = False) -> DiffArray:  # noqa: A001
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape),)

    return _result(out, (a,), backward)


def mean(a: DiffArray, axis=None, keepdims: bool = False) -> DiffArray:
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def layer_norm(a: DiffArray, gamma: DiffArray, beta: DiffArray, eps: float = 1e-5) -> DiffArray:
    """Normalise over the last axis, then scale and shift."""
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def backward(g):
        gx = g * gamma.data
        ga = inv * (gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        return (
            ga,
            _unbroadcast(g * xhat, gamma.shape) if gamma.requires_grad else None,
            _unbroadcast(g, beta.shape) if beta.requires_grad else None,
        )

    return _result(xhat * gamma.data + beta.data, (a, gamma, beta), backward)


def _masked_shift(x: np.ndarray, mask: np.ndarray) -> np.ndarray:
    filled = np.where(mask, x, -np.inf)
    top = filled.max(axis=-1, keepdims=True)
    top = np.where(np.isfinite(top), top, 0.0)
    return np.where(mask, x - top, -np.inf)


def masked_softmax(a: DiffArray, mask: np.ndarray) -> DiffArray:
    """Softmax over the last axis; masked entries get probability and gradient 0."""
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), a.shape)
    e = np.exp(_masked_shift(a.data, mask))
    z = e.sum(axis=-1, keepdims=True)
    p = np.divide(e, z, out=np.zeros_like(e), where=z > 0)

    def backward(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _result(p, (a,), backward)


def masked_log_softmax(a: DiffArray, mask: np.ndarray) -> DiffArray:
    """Log-softmax over the last axis; masked entries are 0 with zero gradient."""
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), a.shape)
    shifted = _masked_shift(a.data, mask)
    e = np.exp(shifted)
    z = e.sum(axis=-1, keepdims=True)
    logz = np.log(np.where(z > 0, z, 1.0))
    out = np.where(mask, shifted - logz, 0.0)
    p = np.where(z > 0, e / np.where(z > 0, z, 1.0), 0.0)

    def backward(g):
        g = np.where(mask, g, 0.0)
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return _result(out, (a,), backward)


# ---------------------------------------------------------------------------
# optimisation


def global_norm(grads: Iterable[np.ndarray]) -> float:
    return float(np.sqrt(np.sum([np.sum(g * g) for g in grads])))


def clip_grad_norm(grads: list[np.ndarray], max_norm: float) -> list[np.ndarray]:
    """Rescale so the global L2 norm is at most ``max_norm``."""
    norm = global_norm(grads)
    if norm <= max_norm or norm == 0.0:
        return grads
    s = max_norm / norm
    return [g * s for g in grads]


class Adam:
    def __init__(self, params: Sequence[DiffArray], lr: float = 5e-4, betas=(0.9, 0.999), eps: float = 1e-8):
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def grads(self) -> list[np.ndarray]:
        return [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]

    def step(self, grads: Sequence[np.ndarray] | None = None):
        if grads is None:
            grads = self.grads()
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1 - b1**self.t
        c2 = 1 - b2**self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_dict(self) -> dict:
        return {"t": self.t, "lr": self.lr}


class ReduceLROnPlateau:
    """Multiply the optimizer lr by ``factor`` after ``patience`` bad checks.

    Mirrors the usual scheduler semantics: a check counts as bad unless the
    metric beats the best so far by a relative threshold; the decay fires
    when the bad count exceeds ``patience``.
    """

    def __init__(self, optimizer: Adam, mode: str = "max", factor: float = 0.9,
                 patience: int = 10, threshold: float = 1e-4, min_lr: float = 0.0):
        if mode not in ("max", "min"):
            raise ValueError("mode must be 'max' or 'min'")
        self.optimizer = optimizer
        self.mode = mode
        self.factor = factor
        self.patience = patience
        self.threshold = threshold
        self.min_lr = min_lr
        self.best: float | None = None
        self.bad_epochs = 0

    def _better(self, metric: float) -> bool:
        if self.best is None:
            return True
        if self.mode == "max":
            return metric > self.best * (1 + self.threshold) if self.best >= 0 else metric > self.best * (1 - self.threshold)
        return metric < self.best * (1 - self.threshold) if self.best >= 0 else metric < self.best * (1 + self.threshold)

    def step(self, metric: float) -> bool:
        """Record a metric; returns True when the lr was reduced."""
        if self._better(metric):
            self.best = metric
            self.bad_epochs = 0
            return False
        self.bad_epochs += 1
        if self.bad_epochs > self.patience:
            self.optimizer.lr = max(self.optimizer.lr * self.factor, self.min_lr)
            self.bad_epochs = 0
            return True
        return False
