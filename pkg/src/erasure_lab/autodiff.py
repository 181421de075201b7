"""Small define-by-run reverse-mode autodiff over float64 numpy arrays.

Operations are recorded on the active :class:`Tape` only when one of their
inputs requires a gradient, so the same forward code serves both training
(inside ``with Tape() as tape``) and fast inference (no tape).
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

NLL_PROB_FLOOR = 1e-12
_MAX_NLL = -np.log(NLL_PROB_FLOOR)


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ContractError(RuntimeError):
    """A caller violated an operation's precondition."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def values(self) -> np.ndarray:
        """Flat row-major view of the data."""
        return self.data.reshape(-1)

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"expected a scalar tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

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


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# --------------------------------------------------------------------- tape


_local = threading.local()


def _active_tape() -> "Tape | None":
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


@dataclass
class _Node:
    out: Tensor
    parents: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Records primitive operations in execution order.

    Execution order is a topological order of the graph, so replaying the
    list backwards visits every node after all of its consumers.
    """

    nodes: list[_Node] = field(default_factory=list)
    grads: dict[int, np.ndarray] = field(default_factory=dict)

    def __enter__(self) -> "Tape":
        if not hasattr(_local, "stack"):
            _local.stack = []
        _local.stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()

    def record(self, out: Tensor, parents: tuple[Tensor, ...], backward) -> None:
        self.nodes.append(_Node(out, parents, backward))

    def backward(self, loss: Tensor) -> None:
        if loss.data.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        self.grads = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = self.grads.get(id(node.out))
            if g is None:
                continue
            for parent, pg in zip(node.parents, node.backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in self.grads:
                    self.grads[key] = self.grads[key] + pg
                else:
                    self.grads[key] = pg
        produced = {id(n.out) for n in self.nodes}
        for node in self.nodes:
            for parent in node.parents:
                if parent.requires_grad and id(parent) not in produced:
                    g = self.grads.get(id(parent))
                    parent.grad = np.zeros_like(parent.data) if g is None else g.reshape(parent.shape)

    def grad(self, t: Tensor) -> np.ndarray:
        g = self.grads.get(id(t))
        return np.zeros_like(t.data) if g is None else g


def backward(loss: Tensor) -> None:
    """Back-propagate through the innermost active tape."""
    tape = _active_tape()
    if tape is None:
        raise ContractError("backward called outside an active Tape")
    tape.backward(loss)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], bw) -> Tensor:
    tape = _active_tape()
    needs = tape is not None and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs)
    if needs:
        tape.record(out, parents, bw)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# --------------------------------------------------------------- primitives


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    return _make(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data
    return _make(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data
    return _make(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data
    return _make(
        out,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def tanh(x) -> Tensor:
    x = as_tensor(x)
    y = np.tanh(x.data)
    return _make(y, (x,), lambda g: (g * (1.0 - y * y),))


def _sigmoid(v: np.ndarray) -> np.ndarray:
    # split on sign so exp never overflows
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)
    return out


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    y = _sigmoid(x.data)
    return _make(y, (x,), lambda g: (g * y * (1.0 - y),))


def log_sigmoid(x) -> Tensor:
    """log(sigmoid(x)), stable for large |x|."""
    x = as_tensor(x)
    y = -np.logaddexp(0.0, -x.data)
    s = _sigmoid(-x.data)
    return _make(y, (x,), lambda g: (g * s,))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    out = np.concatenate([t.data for t in ts], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in ts])

    def bw(g):
        return [
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(ts))
        ]

    return _make(out, ts, bw)


def columns(x, start: int, stop: int) -> Tensor:
    """Slice ``x[:, start:stop]``."""
    x = as_tensor(x)

    def bw(g):
        full = np.zeros_like(x.data)
        full[:, start:stop] = g
        return (full,)

    return _make(x.data[:, start:stop], (x,), bw)


def take_rows(table, index: np.ndarray) -> Tensor:
    """Gather rows of a 2-D table; ``index`` may have any shape."""
    table = as_tensor(table)
    index = np.asarray(index, dtype=np.int64)

    def bw(g):
        full = np.zeros_like(table.data)
        np.add.at(full, index.reshape(-1), g.reshape(-1, table.shape[1]))
        return (full,)

    return _make(table.data[index], (table,), bw)


def reshape(x, shape: tuple[int, ...]) -> Tensor:
    x = as_tensor(x)
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def total(x) -> Tensor:
    """Sum of all elements."""
    x = as_tensor(x)
    return _make(np.array(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),))


def mean(x) -> Tensor:
    x = as_tensor(x)
    n = x.data.size
    return _make(
        np.array(x.data.mean()), (x,), lambda g: (np.broadcast_to(g / n, x.shape).copy(),)
    )


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax with max subtraction (plain arrays, not recorded)."""
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_nll(logits, gold, reduction: str = "mean") -> Tensor:
    """Negative log softmax probability of the gold class.

    ``logits`` is ``[K]`` with an integer ``gold`` or ``[B, K]`` with ``B``
    gold indices. The probability is floored at 1e-12 before the log; the
    gradient is zero in the floored regime.
    """
    logits = as_tensor(logits)
    single = logits.data.ndim == 1
    z = logits.data[None, :] if single else logits.data
    gold_arr = np.atleast_1d(np.asarray(gold))
    k = z.shape[1]
    if gold_arr.shape[0] != z.shape[0]:
        raise DimensionError(f"{gold_arr.shape[0]} gold labels for {z.shape[0]} rows")
    if np.any(gold_arr < 0) or np.any(gold_arr >= k):
        raise IndexError(f"gold label out of range for {k} classes: {gold_arr.tolist()}")
    gold_arr = gold_arr.astype(np.int64)
    rows = np.arange(z.shape[0])
    m = z.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(z - m).sum(axis=1))
    raw = lse - z[rows, gold_arr]
    clamped = raw > _MAX_NLL
    per_row = np.where(clamped, _MAX_NLL, raw)
    probs = softmax(z)
    dz = probs
    dz[rows, gold_arr] -= 1.0
    dz[clamped] = 0.0

    if reduction == "none":
        if single:
            return _make(per_row[0], (logits,), lambda g: (dz[0] * g,))
        return _make(per_row, (logits,), lambda g: (dz * g[:, None],))
    if reduction == "sum":
        scale = 1.0
    elif reduction == "mean":
        scale = 1.0 / z.shape[0]
    else:
        raise ValueError(f"unknown reduction {reduction!r}")
    out = np.array(per_row.sum() * scale)
    if single:
        return _make(out, (logits,), lambda g: (dz[0] * g * scale,))
    return _make(out, (logits,), lambda g: (dz * g * scale,))


def mse(pred, target) -> Tensor:
    """Mean of squared differences; ``(pred - target)**2`` for scalars."""
    pred = as_tensor(pred)
    t = np.broadcast_to(np.asarray(target, dtype=np.float64), pred.shape)
    diff = pred.data - t
    n = max(diff.size, 1)
    return _make(np.array((diff * diff).sum() / n), (pred,), lambda g: (2.0 * diff * g / n,))


# ---------------------------------------------------------- gradient check


@dataclass
class GradCheckReport:
    passed: bool
    max_rel_error: float
    n_checked: int
    worst: tuple[int, int] | None
    tolerance: float

    def __str__(self) -> str:
        verdict = "PASS" if self.passed else "FAIL"
        return (
            f"grad_check {verdict}: max relative error {self.max_rel_error:.3e} "
            f"over {self.n_checked} entries (tolerance {self.tolerance:g})"
        )


def grad_check(
    fn: Callable[[], Tensor],
    params: Iterable[Tensor],
    tolerance: float = 1e-4,
    step: float = 1e-5,
    floor: float = 1e-8,
) -> GradCheckReport:
    """Compare tape gradients of ``fn()`` with central differences.

    ``fn`` must be a pure function of the given parameter tensors. The
    relative error of each entry is ``|a - n| / max(|a|, |n|, floor)``.
    """
    params = list(params)
    flags = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad = True
    try:
        with Tape() as tape:
            loss = fn()
            tape.backward(loss)
        analytic = [tape.grad(p).reshape(p.shape).copy() for p in params]
    finally:
        for p, f in zip(params, flags):
            p.requires_grad = f

    worst_err, worst_at, count = 0.0, None, 0
    for pi, p in enumerate(params):
        flat = p.data.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + step
            up = float(fn().data)
            flat[j] = orig - step
            down = float(fn().data)
            flat[j] = orig
            numeric = (up - down) / (2.0 * step)
            a = float(analytic[pi].reshape(-1)[j])
            err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            count += 1
            if worst_at is None or err > worst_err:
                worst_err, worst_at = err, (pi, j)
    return GradCheckReport(worst_err <= tolerance, worst_err, count, worst_at, tolerance)
