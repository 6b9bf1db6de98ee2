"""Tensor container and the recording tape used for reverse-mode differentiation."""
from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np


class NumericalError(ArithmeticError):
    """A tensor value became NaN or infinite."""


class DimensionError(ValueError):
    """Operand shapes do not conform."""


class EmptySupportError(ValueError):
    """A normalisation was asked to run over zero unmasked positions."""


class ContractError(RuntimeError):
    """An API precondition was violated."""


class Tensor:
    """Dense array with an optional gradient buffer.

    Leaf tensors created with ``requires_grad=True`` are the trainable
    parameters; their ``grad`` buffer is filled by :meth:`Tape.backward`.
    Tensors produced by ops inside an active tape carry ``requires_grad``
    whenever any input does, but they are never leaves.
    """

    __slots__ = ("data", "grad", "requires_grad", "is_leaf", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.is_leaf = True
        self.name = name
        self.grad = np.zeros_like(arr) if requires_grad else None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def astype(self, dtype) -> None:
        """Convert in place, keeping identity so parameter references stay valid."""
        self.data = self.data.astype(dtype)
        if self.grad is not None:
            self.grad = self.grad.astype(dtype)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label})"

    # operator sugar; the implementations live in ops
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops
        return ops.scale(self, -1.0)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def __getitem__(self, index):
        from . import ops
        return ops.getitem(self, index)


BackwardFn = Callable[[np.ndarray], Sequence[np.ndarray | None]]


class _Node:
    __slots__ = ("op", "inputs", "output", "backward")

    def __init__(self, op: str, inputs: tuple[Tensor, ...], output: Tensor, backward: BackwardFn):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward = backward


class Tape:
    """Ordered record of primitive applications.

    Nodes are appended as ops execute, so the list is topologically sorted by
    construction. Each thread has its own active tape; a batch evaluated on
    several threads therefore builds several private graphs.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._produced: set[int] = set()

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, op: str, inputs: tuple[Tensor, ...], output: Tensor, backward: BackwardFn) -> None:
        self.nodes.append(_Node(op, inputs, output, backward))
        self._produced.add(id(output))

    def __enter__(self) -> "Tape":
        stack = _state.__dict__.setdefault("tapes", [])
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _state.tapes.pop()

    def backward(self, loss: Tensor, sink: dict[int, np.ndarray] | None = None) -> dict[int, np.ndarray]:
        """Propagate d(loss)/d(.) to every trainable leaf reachable from ``loss``.

        Gradients are added to ``leaf.grad`` unless ``sink`` is given, in which
        case they are accumulated in ``sink[id(leaf)]`` and leaf buffers are
        left untouched (private buffers for concurrent evaluation).
        """
        if loss.data.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        if not loss.requires_grad:
            return sink if sink is not None else {}
        if id(loss) not in self._produced:
            raise ContractError("loss was not produced on this tape")

        adjoint: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        for node in reversed(self.nodes):
            g = adjoint.pop(id(node.output), None)
            if g is None:
                continue
            grads = node.backward(g)
            for inp, gi in zip(node.inputs, grads):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if inp.is_leaf:
                    leaves[key] = inp
                prev = adjoint.get(key)
                adjoint[key] = gi if prev is None else prev + gi

        out = sink if sink is not None else {}
        for key, leaf in leaves.items():
            g = adjoint[key]
            if sink is not None:
                out[key] = out[key] + g if key in out else g.copy()
            else:
                leaf.grad = leaf.grad + g if leaf.grad is not None else g.copy()
        return out


_state = threading.local()


def active_tape() -> Tape | None:
    stack = getattr(_state, "tapes", None)
    return stack[-1] if stack else None


@contextmanager
def no_record():
    """Evaluate ops without recording, even inside an enclosing tape."""
    stack = _state.__dict__.setdefault("tapes", [])
    saved = list(stack)
    stack.clear()
    try:
        yield
    finally:
        stack.extend(saved)


# Kink probes: non-smooth ops log their branch pattern so the gradient checker
# can tell when a finite-difference step crossed a relu/max/clip boundary.

@contextmanager
def record_kinks():
    log: list[bytes] = []
    prev = getattr(_state, "kinks", None)
    _state.kinks = log
    try:
        yield log
    finally:
        _state.kinks = prev


def log_kink(pattern: np.ndarray) -> None:
    log = getattr(_state, "kinks", None)
    if log is not None:
        arr = np.asarray(pattern)
        log.append(np.packbits(arr.reshape(-1)).tobytes() if arr.dtype == bool else arr.tobytes())


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=dtype) if dtype is not None else np.asarray(x)
    return Tensor(arr)


def make_output(op: str, data: np.ndarray, inputs: tuple[Tensor, ...], backward: BackwardFn) -> Tensor:
    """Wrap an op result, enforce finiteness, and record it on the active tape."""
    if data.dtype.kind == "f" and not np.isfinite(data).all():
        raise NumericalError(f"{op} produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.is_leaf = False
    needs = any(t.requires_grad for t in inputs)
    tape = active_tape() if needs else None
    out.requires_grad = tape is not None
    if tape is not None:
        tape.record(op, inputs, out, backward)
    return out
