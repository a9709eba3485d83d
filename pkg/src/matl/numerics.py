"""Small dense tensors with reverse-mode differentiation and an Adam optimizer.

Tensors wrap float64 numpy arrays of rank <= 3. Every differentiable
operation records its inputs and a backward closure on the output tensor;
``backward`` walks the recorded graph in reverse topological order and then
detaches it, so a fresh graph is built on every forward pass.

Broadcasting is deliberately narrow: equal shapes, a scalar against anything,
and a trailing-suffix operand (a bias row against a matrix, a weight matrix
against a batch of matrices in ``matmul``).
"""

from __future__ import annotations

import contextlib
import os
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

MAX_RANK = 3

_grad_enabled = True
_debug = bool(os.environ.get("MATL_DEBUG"))


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class DomainError(ValueError):
    """An operation was asked to evaluate outside its mathematical domain."""


class UsageError(RuntimeError):
    """An API was called in a state or with arguments it does not accept."""


def set_debug(enabled: bool) -> None:
    """Turn the non-finite check after every forward operation on or off."""
    global _debug
    _debug = enabled


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (rollouts, evaluation)."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64, order="C")
        if arr.ndim > MAX_RANK:
            raise ShapeError(f"rank {arr.ndim} exceeds the supported maximum of {MAX_RANK}")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], tuple] | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __len__(self) -> int:
        return self.data.shape[0]

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={list(self.shape)}, op={self.op}{flag})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self) -> None:
        backward(self)

    # operator sugar
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

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def _not_scalar(t: Tensor):
    raise UsageError(f"item() needs a single-element tensor, got shape {list(t.shape)}")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], op: str,
          backward_fn: Callable[[np.ndarray], tuple]) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    if _debug and not np.all(np.isfinite(data)):
        raise FloatingPointError(f"non-finite values produced by {op}")
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient down to ``shape`` after a scalar or suffix broadcast."""
    if g.shape == shape:
        return g
    if len(shape) == 0 or int(np.prod(shape)) == 1:
        return np.asarray(g.sum()).reshape(shape)
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead)))


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    sa, sb = a.shape, b.shape
    if sa == sb or a.data.size == 1 or b.data.size == 1:
        return
    short, long_ = (sa, sb) if len(sa) < len(sb) else (sb, sa)
    if len(short) < len(long_) and long_[len(long_) - len(short):] == short:
        return
    raise ShapeError(f"{op}: cannot broadcast shapes {list(sa)} and {list(sb)}")


# --------------------------------------------------------------------------
# elementwise
# --------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), "add", bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), "sub", bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), "mul", bw)


def scale(a: Tensor, factor: float) -> Tensor:
    factor = float(factor)
    return _make(a.data * factor, (a,), "scale", lambda g: (g * factor,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), (a,), "relu", lambda g: (g * mask,))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _make(y, (a,), "tanh", lambda g: (g * (1.0 - y * y),))


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return _make(y, (a,), "exp", lambda g: (g * y,))


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise DomainError("log of a non-positive value")
    x = a.data
    return _make(np.log(x), (a,), "log", lambda g: (g / x,))


def square(a: Tensor) -> Tensor:
    x = a.data
    return _make(x * x, (a,), "square", lambda g: (2.0 * g * x,))


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; the gradient is zero where the clamp is active."""
    inside = (a.data >= lo) & (a.data <= hi)
    return _make(np.clip(a.data, lo, hi), (a,), "clip", lambda g: (g * inside,))


def minimum(a, b) -> Tensor:
    """Elementwise minimum; ties route the gradient to ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"minimum: shapes {list(a.shape)} and {list(b.shape)} differ")
    pick_a = a.data <= b.data

    def bw(g):
        return g * pick_a, g * ~pick_a

    return _make(np.where(pick_a, a.data, b.data), (a, b), "minimum", bw)


_UNARY = {"relu": relu, "tanh": tanh, "log": log, "exp": exp, "square": square}
_BINARY = {"add": add, "sub": sub, "mul": mul}


def elementwise(kind: str, *operands, factor: float | None = None) -> Tensor:
    """Dispatch an elementwise operation by name."""
    if kind == "scale":
        return scale(as_tensor(operands[0]), factor if factor is not None else operands[1])
    if kind in _UNARY:
        return _UNARY[kind](as_tensor(operands[0]))
    if kind in _BINARY:
        return _BINARY[kind](*operands)
    raise UsageError(f"unknown elementwise kind {kind!r}")


# --------------------------------------------------------------------------
# linear algebra and structure
# --------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    ``a`` may be [m, k] or a batch [B, m, k]; ``b`` may be [k, n] (shared
    across the batch) or a matching batch [B, k, n].
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shapes {list(a.shape)} and {list(b.shape)} do not align")
    if b.ndim == 3 and (a.ndim != 3 or a.shape[0] != b.shape[0]):
        raise ShapeError(f"matmul: batch sizes of {list(a.shape)} and {list(b.shape)} differ")

    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            gb = np.swapaxes(a.data, -1, -2) @ g
            if b.ndim == 2 and gb.ndim == 3:
                gb = gb.sum(axis=0)
        return ga, gb

    return _make(a.data @ b.data, (a, b), "matmul", bw)


def transpose(a: Tensor) -> Tensor:
    """Swap the last two axes."""
    if a.ndim < 2:
        raise ShapeError(f"transpose needs rank >= 2, got {list(a.shape)}")
    return _make(np.swapaxes(a.data, -1, -2), (a,), "transpose",
                 lambda g: (np.swapaxes(g, -1, -2),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if len(shape) > MAX_RANK:
        raise ShapeError(f"rank {len(shape)} exceeds the supported maximum of {MAX_RANK}")
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {list(a.shape)} to {list(shape)}") from exc
    return _make(out, (a,), "reshape", lambda g: (g.reshape(a.shape),))


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax along the last axis, shifted by the row maximum."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _make(y, (x,), "softmax", bw)


def log_softmax_rows(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    y = z - lse
    p = np.exp(y)

    def bw(g):
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return _make(y, (x,), "log_softmax", bw)


def concat_columns(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate along the last axis (rows must agree)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != b.ndim or a.shape[:-1] != b.shape[:-1]:
        raise ShapeError(f"concat_columns: row shapes {list(a.shape)} and {list(b.shape)} differ")
    p = a.shape[-1]

    def bw(g):
        return g[..., :p], g[..., p:]

    return _make(np.concatenate([a.data, b.data], axis=-1), (a, b), "concat", bw)


def reduce(x: Tensor, axis: int | None = None, kind: str = "sum") -> Tensor:
    """Sum or mean over one axis (or everything when ``axis`` is None)."""
    if kind not in ("sum", "mean"):
        raise UsageError(f"unknown reduction {kind!r}")
    if axis is not None and not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"axis {axis} is invalid for shape {list(x.shape)}")
    count = x.data.size if axis is None else x.shape[axis]
    out = x.data.sum(axis=axis)
    if kind == "mean":
        out = out / count

    def bw(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        g = np.broadcast_to(g, x.shape)
        return (g / count if kind == "mean" else g,)

    return _make(np.asarray(out, dtype=np.float64), (x,), f"reduce_{kind}", bw)


def sum(x: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001 - mirrors numpy
    return reduce(x, axis, "sum")


def mean(x: Tensor, axis: int | None = None) -> Tensor:
    return reduce(x, axis, "mean")


def take_last(x: Tensor, index: np.ndarray) -> Tensor:
    """Pick ``x[..., index]`` per row: [..., k] with int index [...] -> [...]."""
    index = np.asarray(index, dtype=np.int64)
    if index.shape != x.shape[:-1]:
        raise ShapeError(f"take_last: index shape {list(index.shape)} vs tensor {list(x.shape)}")
    picked = np.take_along_axis(x.data, index[..., None], axis=-1)[..., 0]

    def bw(g):
        full = np.zeros_like(x.data)
        np.put_along_axis(full, index[..., None], g[..., None], axis=-1)
        return (full,)

    return _make(picked, (x,), "take", bw)


# --------------------------------------------------------------------------
# backward
# --------------------------------------------------------------------------

def _topological(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every leaf reachable from a scalar ``loss``.

    Leaf gradients accumulate across calls; intermediate gradients are
    discarded and the graph is detached afterwards.
    """
    if loss.data.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {list(loss.shape)}")
    if not loss.requires_grad:
        raise UsageError("loss does not depend on any tensor that requires grad")
    if loss._backward is None:
        _accumulate(loss, np.ones_like(loss.data))
        return
    order = _topological(loss)
    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = pending.pop(id(node), None)
        if g is None or node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent._backward is None:
                _accumulate(parent, pg)
            elif id(parent) in pending:
                pending[id(parent)] = pending[id(parent)] + pg
            else:
                pending[id(parent)] = pg
    for node in order:
        node._parents = ()
        node._backward = None


# --------------------------------------------------------------------------
# optimizer
# --------------------------------------------------------------------------

@dataclass
class AdamState:
    learning_rate: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    first_moment: list[np.ndarray] = field(default_factory=list)
    second_moment: list[np.ndarray] = field(default_factory=list)


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray | None],
              state: AdamState) -> tuple[Sequence[np.ndarray], AdamState]:
    """One bias-corrected Adam update, applied to ``params`` in place.

    A ``None`` gradient is treated as zero.
    """
    if len(params) != len(grads):
        raise UsageError(f"{len(params)} parameters but {len(grads)} gradients")
    if not state.first_moment:
        state.first_moment = [np.zeros_like(p) for p in params]
        state.second_moment = [np.zeros_like(p) for p in params]
    if len(state.first_moment) != len(params):
        raise UsageError("optimizer state tracks a different number of parameters")
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
        if g is None:
            g = np.zeros_like(p)
        if g.shape != p.shape or m.shape != p.shape:
            raise UsageError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= state.learning_rate * (m / c1) / (np.sqrt(v / c2) + state.epsilon)
    return params, state


class Adam:
    """Adam over a fixed list of leaf tensors."""

    def __init__(self, params: Iterable[Tensor], learning_rate: float = 3e-4,
                 beta1: float = 0.9, beta2: float = 0.999, epsilon: float = 1e-8):
        self.params = list(params)
        self.state = AdamState(learning_rate, beta1, beta2, epsilon)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        adam_step([p.data for p in self.params], [p.grad for p in self.params], self.state)
