"""Reverse-mode automatic differentiation on dense float64 arrays.

Operations executed while a :class:`Tape` is active are recorded in order;
:func:`backward` walks the tape in reverse and accumulates gradients into
every leaf tensor that requires them.  Outside a tape, the same operations
simply compute values, so evaluation and training share one code path.

Broadcasting is deliberately limited to scalar-with-array and equal shapes.
Row-wise bias addition and row-wise log-softmax are explicit operations.
"""

from __future__ import annotations

import math
import threading
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, DomainError, NumericError

__all__ = [
    "Tensor",
    "Tape",
    "no_grad",
    "backward",
    "value_and_grad",
    "finite_diff_check",
    "matmul",
    "add",
    "sub",
    "mul",
    "neg",
    "scale",
    "relu",
    "exp",
    "log",
    "elementwise",
    "tensor_sum",
    "tensor_mean",
    "row_sum",
    "add_bias",
    "log_softmax",
    "pick",
    "view",
]


class Tensor:
    """A float64 array with an optional gradient buffer and tape linkage."""

    __slots__ = ("data", "grad", "requires_grad", "tape_node")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.tape_node: tuple[Tape, int] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True).reshape(self.data.shape)
        else:
            self.grad += g

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    __add__ = lambda self, other: add(self, other)  # noqa: E731
    __radd__ = lambda self, other: add(other, self)  # noqa: E731
    __sub__ = lambda self, other: sub(self, other)  # noqa: E731
    __rsub__ = lambda self, other: sub(other, self)  # noqa: E731
    __mul__ = lambda self, other: mul(self, other)  # noqa: E731
    __rmul__ = lambda self, other: mul(other, self)  # noqa: E731
    __matmul__ = lambda self, other: matmul(self, other)  # noqa: E731
    __neg__ = lambda self: neg(self)  # noqa: E731

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise ContractError("division is only supported by a constant")
        return scale(self, 1.0 / float(other))


class Tape:
    """Ordered record of operations, usable as a context manager.

    Each node is ``(op, inputs, backward_fn, output)``.  Nodes are appended in
    execution order, so inputs always precede the node that consumes them.
    """

    def __init__(self):
        self.nodes: list[tuple[str, tuple[Tensor, ...], Callable, Tensor]] = []
        self.active = False

    def __enter__(self) -> "Tape":
        _stack().append(self)
        self.active = True
        return self

    def __exit__(self, *exc) -> None:
        stack = _stack()
        stack.pop()
        self.active = False

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, op: str, inputs: tuple[Tensor, ...], fn: Callable, out: Tensor) -> None:
        out.requires_grad = True
        out.tape_node = (self, len(self.nodes))
        self.nodes.append((op, inputs, fn, out))


class no_grad:
    """Suspend recording on the current thread for the duration of the block."""

    def __enter__(self):
        _stack().append(None)

    def __exit__(self, *exc):
        _stack().pop()


_local = threading.local()


def _stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def _current_tape() -> Tape | None:
    stack = _stack()
    return stack[-1] if stack else None


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(op: str, value: np.ndarray, inputs: tuple[Tensor, ...], fn: Callable) -> Tensor:
    out = Tensor(value)
    tape = _current_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        tape.record(op, inputs, fn, out)
    return out


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.asarray(g.sum()).reshape(shape)


# ---------------------------------------------------------------------------
# primitive operations


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    A, B = a.data, b.data

    def fn(g):
        return (g @ B.T if a.requires_grad else None, A.T @ g if b.requires_grad else None)

    return _emit("matmul", A @ B, (a, b), fn)


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape
    return _emit("add", a.data + b.data, (a, b), lambda g: (_reduce_to(g, sa), _reduce_to(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _emit("sub", a.data - b.data, (a, b), lambda g: (_reduce_to(g, sa), _reduce_to(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "mul")
    A, B = a.data, b.data

    def fn(g):
        return (
            _reduce_to(g * B, A.shape) if a.requires_grad else None,
            _reduce_to(g * A, B.shape) if b.requires_grad else None,
        )

    return _emit("mul", A * B, (a, b), fn)


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _emit("neg", -a.data, (a,), lambda g: (-g,))


def scale(a, c: float) -> Tensor:
    """Multiply by a constant that is not itself differentiated."""
    a = _as_tensor(a)
    c = float(c)
    return _emit("scale", a.data * c, (a,), lambda g: (g * c,))


def relu(a) -> Tensor:
    a = _as_tensor(a)
    # subgradient 0 at exactly 0
    positive = a.data > 0
    return _emit("relu", np.maximum(a.data, 0.0), (a,), lambda g: (g * positive,))


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)
    return _emit("exp", out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = _as_tensor(a)
    if np.any(a.data <= 0):
        raise DomainError("log of a non-positive value; clamp the input first")
    A = a.data
    return _emit("log", np.log(A), (a,), lambda g: (g / A,))


_ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "relu": relu,
    "exp": exp,
    "log": log,
    "scale": scale,
    "neg": neg,
}


def elementwise(op: str, *inputs) -> Tensor:
    """Dispatch an elementwise operation by name (``scale`` takes a constant)."""
    try:
        return _ELEMENTWISE[op](*inputs)
    except KeyError:
        raise ContractError(f"unknown elementwise op {op!r}") from None


def tensor_sum(a) -> Tensor:
    a = _as_tensor(a)
    shape = a.shape
    return _emit("sum", np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, shape),))


def tensor_mean(a) -> Tensor:
    a = _as_tensor(a)
    shape, n = a.shape, a.size
    return _emit("mean", np.asarray(a.data.mean()), (a,), lambda g: (np.broadcast_to(g / n, shape),))


def row_sum(a) -> Tensor:
    """Sum each row of a matrix, giving a vector."""
    a = _as_tensor(a)
    if a.data.ndim != 2:
        raise DimensionError(f"row_sum expects a matrix, got {a.shape}")
    cols = a.shape[1]
    return _emit("row_sum", a.data.sum(axis=1), (a,), lambda g: (np.repeat(g[:, None], cols, axis=1),))


def add_bias(x, b) -> Tensor:
    """Add a length-``h`` bias to every row of a ``batch x h`` matrix."""
    x, b = _as_tensor(x), _as_tensor(b)
    if x.data.ndim != 2 or b.shape != (x.shape[1],):
        raise DimensionError(f"add_bias: bias {b.shape} does not match rows of {x.shape}")
    return _emit("add_bias", x.data + b.data, (x, b), lambda g: (g, g.sum(axis=0)))


def log_softmax(x) -> Tensor:
    """Row-wise log-softmax, stabilised by subtracting each row maximum."""
    x = _as_tensor(x)
    if x.data.ndim != 2:
        raise DimensionError(f"log_softmax expects a matrix, got {x.shape}")
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    probs = np.exp(out)

    def fn(g):
        return (g - probs * g.sum(axis=1, keepdims=True),)

    return _emit("log_softmax", out, (x,), fn)


def pick(x, index) -> Tensor:
    """Select ``x[i, index[i]]`` for every row ``i``."""
    x = _as_tensor(x)
    index = np.asarray(index, dtype=np.intp)
    if x.data.ndim != 2 or index.shape != (x.shape[0],):
        raise DimensionError(f"pick: index {index.shape} does not match rows of {x.shape}")
    rows = np.arange(x.shape[0])
    shape = x.shape

    def fn(g):
        full = np.zeros(shape)
        full[rows, index] = g
        return (full,)

    return _emit("pick", x.data[rows, index], (x,), fn)


def view(flat, offset: int, shape: Sequence[int]) -> Tensor:
    """Reshaped window ``flat[offset:offset+prod(shape)]`` of a 1-D tensor."""
    flat = _as_tensor(flat)
    shape = tuple(shape)
    n = math.prod(shape)
    if flat.data.ndim != 1 or offset < 0 or offset + n > flat.size:
        raise DimensionError(f"view: window {offset}+{shape} outside tensor of shape {flat.shape}")
    total = flat.size

    def fn(g):
        full = np.zeros(total)
        full[offset : offset + n] = g.reshape(-1)
        return (full,)

    return _emit("view", flat.data[offset : offset + n].reshape(shape), (flat,), fn)


# ---------------------------------------------------------------------------
# gradient machinery


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every reachable leaf.

    Calling twice without zeroing the leaves sums the gradients.
    """
    if root.size != 1 or root.data.ndim > 1:
        raise ContractError(f"backward needs a scalar root, got shape {root.shape}")
    if root.tape_node is None:
        if root.requires_grad:
            root._accumulate(np.ones(root.shape))
            return
        raise ContractError("root was not recorded on an active tape")
    tape, index = root.tape_node
    pending: dict[int, np.ndarray] = {id(root): np.ones(root.shape)}
    nodes = tape.nodes
    for i in range(index, -1, -1):
        _, inputs, fn, out = nodes[i]
        g = pending.pop(id(out), None)
        if g is None:
            continue
        for t, gi in zip(inputs, fn(g)):
            if gi is None or not t.requires_grad:
                continue
            if t.tape_node is None:
                t._accumulate(gi)
            else:
                key = id(t)
                prev = pending.get(key)
                pending[key] = gi if prev is None else prev + gi


def value_and_grad(f: Callable[[Tensor], Tensor], x) -> tuple[float, np.ndarray]:
    """Evaluate scalar ``f`` at ``x`` and return its value and gradient."""
    values = x.values if hasattr(x, "values") else np.asarray(x, dtype=np.float64)
    with Tape():
        leaf = Tensor(values, requires_grad=True)
        out = f(leaf)
        backward(out)
    grad = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
    return out.item(), grad


def finite_diff_check(f: Callable[[Tensor], Tensor], theta, step: float = 1e-5) -> float:
    """Largest ``|analytic - central difference| / max(1, |analytic|)`` over coordinates.

    ``f`` maps a flat parameter tensor to a scalar tensor and must be
    deterministic; ``theta`` is a :class:`~flatmatch.model.ParamVector` or
    a 1-D array.
    """
    if not step > 0:
        raise ContractError(f"step must be positive, got {step}")
    values = np.array(theta.values if hasattr(theta, "values") else theta, dtype=np.float64)
    fx, analytic = value_and_grad(f, values)
    if not np.isfinite(fx) or not np.all(np.isfinite(analytic)):
        raise NumericError("function value or gradient is not finite")
    numeric = np.empty_like(values)
    probe = values.copy()
    for i in range(values.size):
        probe[i] = values[i] + step
        up = f(Tensor(probe)).item()
        probe[i] = values[i] - step
        down = f(Tensor(probe)).item()
        probe[i] = values[i]
        if not (np.isfinite(up) and np.isfinite(down)):
            raise NumericError(f"non-finite function value at coordinate {i}")
        numeric[i] = (up - down) / (2.0 * step)
    return float(np.max(np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic)), initial=0.0))
