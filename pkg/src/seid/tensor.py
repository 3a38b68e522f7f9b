"""Dense tensors and tape-based reverse-mode differentiation.

Values are immutable numpy arrays. Operations executed while a :class:`Tape`
is active, with at least one input that requires gradients, append a node
holding a closure that maps the output gradient to input gradients.
``Tape.backward`` replays those nodes in reverse.
"""
from __future__ import annotations

import math
import threading
from dataclasses import dataclass
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .errors import ContractError, ShapeError

_DEFAULT_DTYPE = np.float64
_state = threading.local()


def set_default_dtype(dtype) -> None:
    """Switch compute precision (float64 by default, float32 optional)."""
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float64), np.dtype(np.float32)):
        raise ContractError(f"unsupported dtype {dtype}")
    _DEFAULT_DTYPE = dtype.type


def get_default_dtype():
    return _DEFAULT_DTYPE


class Shape(tuple):
    """Ordered tuple of positive extents."""

    def __new__(cls, dims: Iterable[int] = ()):
        dims = tuple(int(d) for d in dims)
        if any(d < 1 for d in dims):
            raise ShapeError(f"every extent must be >= 1, got {dims}")
        return super().__new__(cls, dims)

    @property
    def size(self) -> int:
        return math.prod(self)

    def concatenable(self, other: Sequence[int], axis: int) -> bool:
        if len(self) != len(other):
            return False
        return all(a == b for i, (a, b) in enumerate(zip(self, other)) if i != axis)


class Tensor:
    """Immutable array value that may participate in differentiation."""

    __slots__ = ("data", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None, dtype=None):
        arr = np.array(data, dtype=dtype or _DEFAULT_DTYPE)
        Shape(arr.shape)
        arr.setflags(write=False)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool = False) -> "Tensor":
        t = cls.__new__(cls)
        if arr.flags.writeable:
            arr.setflags(write=False)
        t.data = arr
        t.requires_grad = requires_grad
        t.name = None
        return t

    @property
    def shape(self) -> Shape:
        return Shape(self.data.shape)

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_not_scalar(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={tuple(self.data.shape)}{flag})"

    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


def _raise_not_scalar(t: Tensor):
    raise ContractError(f"tensor of shape {tuple(t.shape)} is not a scalar")


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def tensor(data, requires_grad: bool = False, name: Optional[str] = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


# --------------------------------------------------------------------------
# tape


@dataclass
class Node:
    op: str
    inputs: tuple
    output: Tensor
    backward: Callable[[np.ndarray], tuple]


class Gradients:
    """Gradient store returned by :meth:`Tape.backward`, keyed by tensor."""

    def __init__(self, grads: dict, tensors: dict):
        self._grads = grads
        self._tensors = tensors

    def __getitem__(self, t: Tensor) -> np.ndarray:
        g = self._grads.get(id(t))
        if g is None:
            if not t.requires_grad:
                raise KeyError("tensor does not require gradients")
            return np.zeros_like(t.data)
        return g

    def get(self, t: Tensor, default=None):
        g = self._grads.get(id(t))
        return default if g is None else g

    def __contains__(self, t: Tensor) -> bool:
        return id(t) in self._grads

    def __len__(self) -> int:
        return len(self._grads)


class Tape:
    """Append-only record of differentiable operations.

    Use as a context manager; operations inside the ``with`` block are
    recorded. A tape is single-writer.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self._produced: dict[int, int] = {}

    def __enter__(self) -> "Tape":
        stack = _tape_stack()
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        stack.pop()

    def record(self, op: str, inputs: Sequence[Tensor], output: Tensor, backward) -> None:
        self._produced[id(output)] = len(self.nodes)
        self.nodes.append(Node(op, tuple(inputs), output, backward))

    def backward(self, loss: Tensor) -> Gradients:
        if loss.data.size != 1:
            raise ContractError(f"loss must be a scalar, got shape {tuple(loss.shape)}")
        if id(loss) not in self._produced and not loss.requires_grad:
            raise ContractError("loss was not produced on this tape")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        tensors: dict[int, Tensor] = {id(loss): loss}
        end = self._produced.get(id(loss), -1)
        for node in reversed(self.nodes[: end + 1]):
            g = grads.get(id(node.output))
            if g is None:
                continue
            in_grads = node.backward(g)
            for inp, ig in zip(node.inputs, in_grads):
                if ig is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + ig
                else:
                    grads[key] = ig
                    tensors[key] = inp
        return Gradients(grads, tensors)


def backward(tape: Tape, loss: Tensor) -> Gradients:
    return tape.backward(loss)


def _tape_stack() -> list:
    stack = getattr(_state, "tapes", None)
    if stack is None:
        stack = _state.tapes = []
    return stack


def active_tape() -> Optional[Tape]:
    stack = _tape_stack()
    return stack[-1] if stack else None


class no_grad:
    """Suspend recording on the current thread."""

    def __enter__(self):
        self._saved = list(_tape_stack())
        _tape_stack().clear()

    def __exit__(self, *exc):
        _tape_stack().extend(self._saved)


def make_result(op: str, out: np.ndarray, inputs: Sequence[Tensor], backward) -> Tensor:
    """Wrap ``out`` and record it on the active tape if any input needs grads."""
    tape = active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    result = Tensor._wrap(out, requires_grad=needs)
    if needs:
        tape.record(op, inputs, result, backward)
    return result


# --------------------------------------------------------------------------
# elementwise


def _broadcast_kind(a: Shape, b: Shape) -> str:
    if a == b:
        return "same"
    if len(a) == 4 and len(b) == 4:
        if b == (1, a[1], 1, 1):
            return "b-channel"
        if a == (1, b[1], 1, 1):
            return "a-channel"
    raise ShapeError(f"cannot broadcast {tuple(a)} with {tuple(b)}")


def _unbroadcast(g: np.ndarray, kind: str, side: str) -> np.ndarray:
    if kind == f"{side}-channel":
        return g.sum(axis=(0, 2, 3), keepdims=True)
    return g


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def elementwise(kind: str, a: Tensor, b: Optional[Tensor] = None, *, factor: float = 1.0) -> Tensor:
    """Apply ``add``, ``sub``, ``mul``, ``relu``, ``sigmoid`` or ``scale``."""
    if kind in ("add", "sub", "mul"):
        if b is None:
            raise ContractError(f"{kind} needs two operands")
        bk = _broadcast_kind(a.shape, b.shape)
        x, y = a.data, b.data
        if kind == "add":
            out = x + y

            def back(g):
                return _unbroadcast(g, bk, "a"), _unbroadcast(g, bk, "b")
        elif kind == "sub":
            out = x - y

            def back(g):
                return _unbroadcast(g, bk, "a"), _unbroadcast(-g, bk, "b")
        else:
            out = x * y

            def back(g):
                return _unbroadcast(g * y, bk, "a"), _unbroadcast(g * x, bk, "b")
        return make_result(kind, out, (a, b), back)

    if kind == "relu":
        mask = a.data > 0
        out = np.where(mask, a.data, 0.0).astype(a.data.dtype)
        return make_result("relu", out, (a,), lambda g: (g * mask,))
    if kind == "sigmoid":
        out = _sigmoid(a.data)
        return make_result("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))
    if kind == "scale":
        f = float(factor)
        return make_result("scale", a.data * f, (a,), lambda g: (g * f,))
    raise ContractError(f"unknown elementwise kind {kind!r}")


def add(a: Tensor, b: Tensor) -> Tensor:
    return elementwise("add", a, b)


def sub(a: Tensor, b: Tensor) -> Tensor:
    return elementwise("sub", a, b)


def mul(a: Tensor, b: Tensor) -> Tensor:
    return elementwise("mul", a, b)


def relu(a: Tensor) -> Tensor:
    return elementwise("relu", a)


def sigmoid(a: Tensor) -> Tensor:
    return elementwise("sigmoid", a)


def scale(a: Tensor, factor: float) -> Tensor:
    return elementwise("scale", a, factor=factor)


# --------------------------------------------------------------------------
# linear algebra and shape ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul of {tuple(a.shape)} and {tuple(b.shape)}")
    x, y = a.data, b.data

    def back(g):
        return g @ y.T, x.T @ g

    return make_result("matmul", x @ y, (a, b), back)


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ShapeError("transpose expects a matrix")
    return make_result("transpose", a.data.T.copy(), (a,), lambda g: (g.T,))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    src = a.data.shape
    out = a.data.reshape(shape)
    Shape(out.shape)
    return make_result("reshape", out, (a,), lambda g: (g.reshape(src),))


def sum(a: Tensor) -> Tensor:  # noqa: A001
    src = a.data
    return make_result("sum", np.array(src.sum()), (a,), lambda g: (np.full_like(src, g),))


def mean(a: Tensor) -> Tensor:
    src = a.data
    n = src.size
    return make_result("mean", np.array(src.mean()), (a,), lambda g: (np.full_like(src, g / n),))


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=requires_grad)


def ones(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=requires_grad)


# --------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckResult:
    max_rel_error: float
    passed: bool
    excluded: int
    checked: int
    worst_index: Optional[tuple] = None


def _evaluate(f, arr: np.ndarray) -> float:
    with no_grad():
        y = f(Tensor(arr))
    if y.data.size != 1:
        raise ContractError("grad_check needs a scalar-valued function")
    return float(y.data.reshape(()))


def grad_check(
    f: Callable[[Tensor], Tensor],
    x,
    step: float = 1e-5,
    tolerance: float = 1e-4,
    kink_tol: float = 1e-3,
) -> GradCheckResult:
    """Compare tape gradients of scalar ``f`` at ``x`` to central differences.

    Entries where forward and backward one-sided differences disagree by more
    than ``kink_tol`` (relative) sit at a non-differentiable point, such as a
    relu input of exactly zero or a max-pool tie, and are excluded.
    """
    if step <= 0:
        raise ContractError("step must be positive")
    x0 = np.array(x.data if isinstance(x, Tensor) else x, dtype=_DEFAULT_DTYPE)
    with Tape() as tape:
        xt = Tensor(x0, requires_grad=True)
        y = f(xt)
    if y.data.size != 1:
        raise ContractError(f"grad_check needs a scalar-valued function, got {tuple(y.shape)}")
    analytic = tape.backward(y)[xt]
    f0 = float(y.data.reshape(()))

    worst, worst_idx, excluded, checked = 0.0, None, 0, 0
    work = x0.copy()
    for idx in np.ndindex(x0.shape):
        orig = work[idx]
        work[idx] = orig + step
        fp = _evaluate(f, work)
        work[idx] = orig - step
        fm = _evaluate(f, work)
        work[idx] = orig
        fwd = (fp - f0) / step
        bwd = (f0 - fm) / step
        if abs(fwd - bwd) > kink_tol * max(1.0, abs(fwd), abs(bwd)):
            excluded += 1
            continue
        numeric = (fp - fm) / (2 * step)
        a = float(analytic[idx])
        rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
        checked += 1
        if rel > worst:
            worst, worst_idx = rel, idx
    return GradCheckResult(worst, worst <= tolerance, excluded, checked, worst_idx)
