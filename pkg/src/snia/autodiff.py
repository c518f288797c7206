"""A small define-by-run reverse-mode engine over 2-D float64 arrays.

Every op returns a new :class:`Tensor`; when any input requires gradients the
result remembers its parents and a closure that pushes its gradient back.
``loss.backward()`` walks that tape in reverse topological order.

Broadcasting is limited to adding a ``(1, cols)`` row to every row.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class DimensionError(ValueError):
    pass


class DomainError(ValueError):
    pass


class UsageError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, name=None):
        data = np.array(data, dtype=np.float64)
        if data.ndim == 0:
            data = data.reshape(1, 1)
        elif data.ndim == 1:
            data = data.reshape(1, -1)
        elif data.ndim != 2:
            raise DimensionError(f"tensors are 2-D, got shape {data.shape}")
        self.data = data
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        tag = f" {self.name}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError(f"item() needs a single element, shape is {self.shape}")
        return float(self.data[0, 0])

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self):
        self.grad = None

    def backward(self):
        if self.shape != (1, 1):
            raise UsageError(f"backward() needs a scalar (1x1) loss, got shape {self.shape}")
        order = _topo_order(self)
        # interior gradients belong to this pass only; leaves accumulate
        for node in order:
            if node._parents:
                node.grad = None
        _accumulate(self, np.ones((1, 1)))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # operator sugar
    def __matmul__(self, other):
        return matmul(self, other)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return hadamard(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _accumulate(t: Tensor, g):
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad += g


def _topo_order(root):
    order, seen, stack = [], set(), [(root, False)]
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
            if id(p) not in seen:
                stack.append((p, False))
    return order


def _result(data, parents, backward):
    parents = tuple(p for p in parents if p.requires_grad)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.requires_grad = bool(parents)
    out._parents = parents
    out._backward = backward if parents else None
    return out


# --------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def back(g):
        if a.requires_grad:
            _accumulate(a, g @ b.data.T)
        if b.requires_grad:
            _accumulate(b, a.data.T @ g)

    return _result(a.data @ b.data, (a, b), back)


def spmm(sparse, dense) -> Tensor:
    """``sparse @ dense``; the sparse operand is a constant."""
    dense = _as_tensor(dense)
    if sparse.shape[1] != dense.shape[0]:
        raise DimensionError(f"spmm shape mismatch: sparse {sparse.shape} @ {dense.shape}")

    def back(g):
        _accumulate(dense, sparse.T @ g)

    return _result(sparse @ dense.data, (dense,), back)


def _check_add(a, b, op):
    if a.shape == b.shape:
        return False
    if b.shape == (1, a.shape[1]):
        return True
    raise DimensionError(f"{op} shape mismatch: {a.shape} and {b.shape}")


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    row = _check_add(a, b, "add")

    def back(g):
        if a.requires_grad:
            _accumulate(a, g)
        if b.requires_grad:
            _accumulate(b, g.sum(axis=0, keepdims=True) if row else g)

    return _result(a.data + b.data, (a, b), back)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    row = _check_add(a, b, "sub")

    def back(g):
        if a.requires_grad:
            _accumulate(a, g)
        if b.requires_grad:
            _accumulate(b, -(g.sum(axis=0, keepdims=True) if row else g))

    return _result(a.data - b.data, (a, b), back)


def hadamard(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"hadamard shape mismatch: {a.shape} and {b.shape}")

    def back(g):
        if a.requires_grad:
            _accumulate(a, g * b.data)
        if b.requires_grad:
            _accumulate(b, g * a.data)

    return _result(a.data * b.data, (a, b), back)


def scale(a, c: float) -> Tensor:
    a = _as_tensor(a)
    return _result(a.data * c, (a,), lambda g: _accumulate(a, g * c))


def concat_rows(a, b) -> Tensor:
    """Join two tensors with equal row counts side by side (1xF, 1xF -> 1x2F)."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape[0] != b.shape[0]:
        raise DimensionError(f"concat_rows row mismatch: {a.shape} and {b.shape}")
    k = a.shape[1]

    def back(g):
        if a.requires_grad:
            _accumulate(a, g[:, :k])
        if b.requires_grad:
            _accumulate(b, g[:, k:])

    return _result(np.concatenate([a.data, b.data], axis=1), (a, b), back)


def stack_rows(a, b) -> Tensor:
    """Place ``b``'s rows under ``a``'s (equal column counts)."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape[1] != b.shape[1]:
        raise DimensionError(f"stack_rows column mismatch: {a.shape} and {b.shape}")
    k = a.shape[0]

    def back(g):
        if a.requires_grad:
            _accumulate(a, g[:k])
        if b.requires_grad:
            _accumulate(b, g[k:])

    return _result(np.concatenate([a.data, b.data], axis=0), (a, b), back)


def pick(a, index) -> Tensor:
    """Column ``index[i]`` of row ``i`` -> (rows, 1)."""
    a = _as_tensor(a)
    index = np.asarray(index, dtype=np.int64).reshape(-1)
    if index.shape[0] != a.shape[0]:
        raise DimensionError(f"pick needs one index per row: {a.shape} vs {index.shape}")
    rows = np.arange(a.shape[0])

    def back(g):
        full = np.zeros_like(a.data)
        full[rows, index] = g[:, 0]
        _accumulate(a, full)

    return _result(a.data[rows, index][:, None], (a,), back)


def take_rows(a, rows) -> Tensor:
    a = _as_tensor(a)
    rows = np.asarray(rows, dtype=np.int64).reshape(-1)

    def back(g):
        full = np.zeros_like(a.data)
        np.add.at(full, rows, g)
        _accumulate(a, full)

    return _result(a.data[rows], (a,), back)


def total(a) -> Tensor:
    a = _as_tensor(a)
    return _result(np.array([[a.data.sum()]]), (a,),
                   lambda g: _accumulate(a, np.full(a.shape, g[0, 0])))


def sum_rows(a) -> Tensor:
    """Row sums -> (rows, 1)."""
    a = _as_tensor(a)
    return _result(a.data.sum(axis=1, keepdims=True), (a,),
                   lambda g: _accumulate(a, np.broadcast_to(g, a.shape)))


def mean(a) -> Tensor:
    a = _as_tensor(a)
    n = a.data.size
    return _result(np.array([[a.data.mean()]]), (a,),
                   lambda g: _accumulate(a, np.full(a.shape, g[0, 0] / n)))


# --------------------------------------------------------------------------
# elementwise


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    y = np.tanh(a.data)
    return _result(y, (a,), lambda g: _accumulate(a, g * (1.0 - y * y)))


def relu(a) -> Tensor:
    a = _as_tensor(a)
    on = a.data > 0
    return _result(np.where(on, a.data, 0.0), (a,), lambda g: _accumulate(a, g * on))


def exp(a) -> Tensor:
    a = _as_tensor(a)
    y = np.exp(a.data)
    return _result(y, (a,), lambda g: _accumulate(a, g * y))


def log(a) -> Tensor:
    a = _as_tensor(a)
    if not np.all(a.data > 0):
        raise DomainError("log of a non-positive entry")
    return _result(np.log(a.data), (a,), lambda g: _accumulate(a, g / a.data))


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; gradient passes only where the input is inside."""
    a = _as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return _result(np.clip(a.data, lo, hi), (a,), lambda g: _accumulate(a, g * inside))


def minimum(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"minimum shape mismatch: {a.shape} and {b.shape}")
    take_a = a.data <= b.data

    def back(g):
        if a.requires_grad:
            _accumulate(a, g * take_a)
        if b.requires_grad:
            _accumulate(b, g * ~take_a)

    return _result(np.where(take_a, a.data, b.data), (a, b), back)


def huber(a, delta: float = 1.0) -> Tensor:
    """0.5 x^2 inside |x| < delta, delta (|x| - delta/2) outside."""
    a = _as_tensor(a)
    x = a.data
    inside = np.abs(x) < delta
    y = np.where(inside, 0.5 * x * x, delta * (np.abs(x) - 0.5 * delta))
    slope = np.where(inside, x, delta * np.sign(x))
    return _result(y, (a,), lambda g: _accumulate(a, g * slope))


# --------------------------------------------------------------------------
# row-wise distributions


def softmax_row(a) -> Tensor:
    a = _as_tensor(a)
    if not np.all(np.isfinite(a.data)):
        raise DomainError("softmax of a non-finite entry")
    z = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)

    def back(g):
        _accumulate(a, p * (g - (g * p).sum(axis=1, keepdims=True)))

    return _result(p, (a,), back)


def log_softmax_row(a, mask=None) -> Tensor:
    """Row-wise log-softmax, optionally restricted to ``mask``-selected columns.

    Masked-out entries carry the value 0.0 (not -inf) and receive no gradient;
    callers multiply by the mask wherever those entries could leak.
    """
    a = _as_tensor(a)
    if mask is None:
        z = a.data - a.data.max(axis=1, keepdims=True)
        lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
        out = z - lse
        p = np.exp(out)

        def back(g):
            _accumulate(a, g - p * g.sum(axis=1, keepdims=True))

        return _result(out, (a,), back)

    mask = np.asarray(mask, dtype=bool).reshape(a.shape)
    if not mask.any(axis=1).all():
        raise DomainError("log_softmax_row with an all-masked row")
    z = np.where(mask, a.data, -np.inf)
    z = z - z.max(axis=1, keepdims=True)
    e = np.where(mask, np.exp(z), 0.0)
    lse = np.log(e.sum(axis=1, keepdims=True))
    out = np.where(mask, z - lse, 0.0)
    p = np.where(mask, np.exp(out), 0.0)

    def back(g):
        g = np.where(mask, g, 0.0)
        _accumulate(a, g - p * g.sum(axis=1, keepdims=True))

    return _result(out, (a,), back)


# --------------------------------------------------------------------------
# optimisation


def zero_grad(params):
    for p in params:
        p.grad = None


def global_grad_norm(params) -> float:
    return float(np.sqrt(sum(float((p.grad ** 2).sum()) for p in params if p.grad is not None)))


def clip_grad_norm(params, max_norm: float) -> float:
    norm = global_grad_norm(params)
    if norm > max_norm:
        factor = max_norm / (norm + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad *= factor
    return norm


@dataclass
class AdamState:
    """Moment buffers and hyper-parameters for :func:`adam_step`.

    ``schedule`` is ``"constant"`` or ``"linear"``; the linear schedule scales
    the rate by ``1 - step / total_steps`` (floored at zero), where ``step``
    counts the updates already applied.
    """

    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    schedule: str = "constant"
    total_steps: int | None = None
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def current_lr(self) -> float:
        if self.schedule == "constant":
            return self.lr
        if self.schedule == "linear":
            if not self.total_steps:
                raise UsageError("linear schedule needs total_steps")
            return self.lr * max(0.0, 1.0 - self.step / self.total_steps)
        raise UsageError(f"unknown lr schedule {self.schedule!r}")


def adam_step(params, state: AdamState) -> None:
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    for p, m in zip(params, state.m):
        if m.shape != p.data.shape:
            raise DimensionError(f"moment buffer {m.shape} does not match parameter {p.shape}")
    lr = state.current_lr()
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, m, v in zip(params, state.m, state.v):
        if p.grad is None:
            continue
        g = p.grad
        if state.weight_decay:
            g = g + state.weight_decay * p.data
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
