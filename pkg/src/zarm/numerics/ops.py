"""Differentiable primitives.

Arrays are row-major with the feature axis last: a sequence of ``len`` vectors
of width ``d`` is stored as ``(..., len, d)``. Leading batch axes are carried
through unchanged, which lets a whole minibatch share one graph.
"""
from __future__ import annotations

from contextlib import contextmanager

import numpy as np

from .tensor import (
    DimensionError,
    EmptySupportError,
    Tensor,
    as_tensor,
    log_kink,
    make_output,
)

_faults: set[str] = set()


@contextmanager
def inject_fault(name: str):
    """Test hook: corrupt one backward rule (currently ``softmax_backward``)."""
    _faults.add(name)
    try:
        yield
    finally:
        _faults.discard(name)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _const(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return as_tensor(x, dtype=dtype)


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a = _const(a, b if isinstance(b, Tensor) else None)
    b = _const(b, a)
    try:
        data = a.data + b.data
    except ValueError as exc:
        raise DimensionError(f"add: shapes {a.shape} and {b.shape} do not broadcast") from exc
    return make_output("add", data, (a, b),
                       lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a = _const(a, b if isinstance(b, Tensor) else None)
    b = _const(b, a)
    try:
        data = a.data - b.data
    except ValueError as exc:
        raise DimensionError(f"sub: shapes {a.shape} and {b.shape} do not broadcast") from exc
    return make_output("sub", data, (a, b),
                       lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a = _const(a, b if isinstance(b, Tensor) else None)
    b = _const(b, a)
    try:
        data = a.data * b.data
    except ValueError as exc:
        raise DimensionError(f"mul: shapes {a.shape} and {b.shape} do not broadcast") from exc

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_output("mul", data, (a, b), backward)


def scale(x: Tensor, c: float) -> Tensor:
    return make_output("scale", x.data * c, (x,), lambda g: (g * c,))


def square(x: Tensor) -> Tensor:
    return make_output("square", x.data * x.data, (x,), lambda g: (2.0 * g * x.data,))


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    log_kink(pos)
    return make_output("relu", np.where(pos, x.data, 0).astype(x.dtype), (x,),
                       lambda g: (g * pos,))


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    e = np.exp(-np.abs(d))
    out = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype)
    return make_output("sigmoid", out, (x,), lambda g: (g * out * (1.0 - out),))


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    inside = (x.data >= lo) & (x.data <= hi)
    log_kink(inside)
    return make_output("clip", np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,))


def log(x: Tensor) -> Tensor:
    if (x.data <= 0).any():
        raise DimensionError("log: non-positive input")
    return make_output("log", np.log(x.data), (x,), lambda g: (g / x.data,))


# ---------------------------------------------------------------- reductions

def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    data = np.sum(x.data, axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return make_output("sum", np.asarray(data), (x,), backward)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return scale(sum(x, axis=axis, keepdims=keepdims), 1.0 / float(n))


def masked_mean(x: Tensor, mask: np.ndarray, axis: int = -1, allow_empty: bool = False) -> Tensor:
    """Mean over ``axis`` counting only positions where ``mask`` is true."""
    mask = np.asarray(mask, dtype=bool)
    m = np.broadcast_to(mask, x.shape)
    count = m.sum(axis=axis, keepdims=True)
    if (count == 0).any() and not allow_empty:
        raise EmptySupportError("masked_mean over an empty support")
    inv = np.where(count > 0, 1.0 / np.maximum(count, 1), 0.0).astype(x.dtype)
    data = np.sum(np.where(m, x.data, 0), axis=axis, keepdims=True) * inv
    w = m * inv

    def backward(g):
        return (g * w,)

    return make_output("masked_mean", np.squeeze(data, axis=axis), (x,),
                       lambda g: backward(np.expand_dims(g, axis)))


def masked_max(x: Tensor, mask: np.ndarray | None = None, axis: int = -1,
               allow_empty: bool = False) -> Tensor:
    """Max over ``axis`` among unmasked positions.

    The gradient goes to the first maximal index on ties.
    """
    axis = axis % x.ndim
    if mask is None:
        m = np.ones(x.shape, dtype=bool)
    else:
        m = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
    any_real = m.any(axis=axis, keepdims=True)
    if not any_real.all() and not allow_empty:
        raise EmptySupportError("masked_max over an empty support")
    filled = np.where(m, x.data, -np.inf)
    idx = np.argmax(filled, axis=axis)
    idx_k = np.expand_dims(idx, axis)
    data = np.take_along_axis(x.data, idx_k, axis=axis)
    data = np.where(any_real, data, 0).astype(x.dtype)
    log_kink(idx_k)

    def backward(g):
        gx = np.zeros_like(x.data)
        gk = np.where(any_real, np.expand_dims(g, axis), 0)
        np.put_along_axis(gx, idx_k, gk, axis=axis)
        return (gx,)

    return make_output("masked_max", np.squeeze(data, axis=axis), (x,), backward)


def softmax(scores: Tensor, mask: np.ndarray | None = None, axis: int = -1,
            allow_empty: bool = False) -> Tensor:
    """Masked, max-shifted softmax along ``axis``.

    Masked positions come out exactly zero. A slice with no unmasked position
    raises :class:`EmptySupportError` unless ``allow_empty``, in which case the
    slice is all zeros and passes no gradient.
    """
    s = scores.data
    if s.shape[axis] < 1:
        raise EmptySupportError("softmax over zero positions")
    if mask is None:
        m = np.ones(s.shape, dtype=bool)
    else:
        m = np.broadcast_to(np.asarray(mask, dtype=bool), s.shape)
    any_real = m.any(axis=axis, keepdims=True)
    if not any_real.all() and not allow_empty:
        raise EmptySupportError("softmax: every position is masked")
    filled = np.where(m, s, -np.inf)
    shift = np.where(any_real, np.max(filled, axis=axis, keepdims=True), 0)
    e = np.where(m, np.exp(np.where(m, s - shift, 0)), 0)
    z = e.sum(axis=axis, keepdims=True)
    out = (e / np.where(z > 0, z, 1)).astype(s.dtype)

    def backward(g):
        dot = np.sum(g * out, axis=axis, keepdims=True)
        gx = out * (g - dot)
        if "softmax_backward" in _faults:
            gx = -gx
        return (gx,)

    return make_output("softmax", out, (scores,), backward)


# ---------------------------------------------------------------- linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a = _const(a)
    b = _const(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    data = np.matmul(a.data, b.data)

    def backward(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape) if b.requires_grad else None
        return ga, gb

    return make_output("matmul", data, (a, b), backward)


def einsum(subscripts: str, a: Tensor, b: Tensor) -> Tensor:
    """Two-operand einsum without repeated or operand-private summed indices."""
    lhs, out_idx = subscripts.replace(" ", "").split("->")
    ia, ib = lhs.split(",")
    for name, idx, t in (("first", ia, a), ("second", ib, b)):
        if len(idx) != t.ndim:
            raise DimensionError(f"einsum {subscripts}: {name} operand has shape {t.shape}")
    try:
        data = np.einsum(subscripts, a.data, b.data, optimize=True)
    except ValueError as exc:
        raise DimensionError(f"einsum {subscripts}: shapes {a.shape}, {b.shape}") from exc

    def backward(g):
        ga = np.einsum(f"{out_idx},{ib}->{ia}", g, b.data, optimize=True) if a.requires_grad else None
        gb = np.einsum(f"{out_idx},{ia}->{ib}", g, a.data, optimize=True) if b.requires_grad else None
        return ga, gb

    return make_output("einsum", np.asarray(data), (a, b), backward)


def linear(x: Tensor, W: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ W.T + b`` over the last axis of ``x``."""
    if W.ndim != 2 or x.shape[-1] != W.shape[1]:
        raise DimensionError(f"linear: input {x.shape} does not match weight {W.shape}")
    if b is not None and b.shape != (W.shape[0],):
        raise DimensionError(f"linear: bias {b.shape} does not match weight {W.shape}")
    data = x.data @ W.data.T
    if b is not None:
        data = data + b.data
    inputs = (x, W) if b is None else (x, W, b)

    def backward(g):
        gx = g @ W.data if x.requires_grad else None
        g2 = g.reshape(-1, g.shape[-1])
        gW = g2.T @ x.data.reshape(-1, x.shape[-1]) if W.requires_grad else None
        if b is None:
            return gx, gW
        return gx, gW, g2.sum(axis=0)

    return make_output("linear", data, inputs, backward)


def dense(x: Tensor, W: Tensor, b: Tensor, activation: str = "relu") -> Tensor:
    """activation(W x + b); ``activation`` is ``"relu"`` or ``"identity"``."""
    y = linear(x, W, b)
    if activation == "relu":
        return relu(y)
    if activation == "identity":
        return y
    raise ValueError(f"unknown activation {activation!r}")


def normalize(x: Tensor, axis: int = -1) -> Tensor:
    """Scale to unit L2 norm along ``axis``; zero vectors stay zero."""
    norm = np.sqrt(np.sum(x.data * x.data, axis=axis, keepdims=True))
    nz = norm > 0
    safe = np.where(nz, norm, 1)
    out = np.where(nz, x.data / safe, 0).astype(x.dtype)

    def backward(g):
        proj = np.sum(g * out, axis=axis, keepdims=True)
        return (np.where(nz, (g - out * proj) / safe, 0),)

    return make_output("normalize", out, (x,), backward)


# ---------------------------------------------------------------- shape plumbing

def reshape(x: Tensor, shape) -> Tensor:
    return make_output("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def swapaxes(x: Tensor, a: int, b: int) -> Tensor:
    return make_output("swapaxes", np.swapaxes(x.data, a, b), (x,),
                       lambda g: (np.swapaxes(g, a, b),))


def concat(xs: list[Tensor], axis: int = -1) -> Tensor:
    xs = [_const(t) for t in xs]
    data = np.concatenate([t.data for t in xs], axis=axis)
    sizes = np.cumsum([t.shape[axis] for t in xs])[:-1]
    return make_output("concat", data, tuple(xs),
                       lambda g: tuple(np.split(g, sizes, axis=axis)))


def stack(xs: list[Tensor], axis: int = 0) -> Tensor:
    xs = [_const(t) for t in xs]
    data = np.stack([t.data for t in xs], axis=axis)
    n = len(xs)
    return make_output("stack", data, tuple(xs),
                       lambda g: tuple(np.squeeze(p, axis) for p in np.split(g, n, axis=axis)))


def getitem(x: Tensor, index) -> Tensor:
    def backward(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, index, g)
        return (gx,)

    return make_output("getitem", np.asarray(x.data[index]), (x,), backward)


def gather(table: Tensor, indices: np.ndarray, pad_index: int | None = None) -> Tensor:
    """Row lookup ``table[indices]``.

    Negative indices and ``pad_index`` yield exact zero rows and receive no
    gradient, so a padding row can never drift away from zero.
    """
    idx = np.asarray(indices, dtype=np.int64)
    valid = idx >= 0
    if pad_index is not None:
        valid &= idx != pad_index
    if (idx >= table.shape[0]).any():
        raise IndexError(f"gather: index {int(idx.max())} out of range for {table.shape[0]} rows")
    safe = np.where(valid, idx, 0)
    data = table.data[safe]
    if not valid.all():
        data = np.where(valid[..., None] if table.ndim > 1 else valid, data, 0).astype(table.dtype)

    def backward(g):
        gt = np.zeros_like(table.data)
        sel = valid.reshape(-1)
        g2 = g.reshape((-1,) + table.shape[1:])
        np.add.at(gt, safe.reshape(-1)[sel], g2[sel])
        return (gt,)

    return make_output("gather", data, (table,), backward)


def unfold(x: Tensor, width: int) -> Tensor:
    """Sliding windows over axis -2 with zero padding.

    ``(..., len, d) -> (..., len, width*d)``; window ``j`` is the concatenation
    of rows ``j-h .. j+h`` with ``h = (width-1)//2``, rows outside the
    sequence contributing zeros.
    """
    if width < 1 or width % 2 == 0:
        raise DimensionError(f"unfold: width must be odd and positive, got {width}")
    h = (width - 1) // 2
    n = x.shape[-2]
    pad = [(0, 0)] * (x.ndim - 2) + [(h, h), (0, 0)]
    padded = np.pad(x.data, pad)
    data = np.concatenate([padded[..., o:o + n, :] for o in range(width)], axis=-1)
    d = x.shape[-1]

    def backward(g):
        gp = np.zeros_like(padded)
        for o in range(width):
            gp[..., o:o + n, :] += g[..., o * d:(o + 1) * d]
        return (gp[..., h:h + n, :],)

    return make_output("unfold", data, (x,), backward)


def dropout(x: Tensor, p: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout; identity when not training or ``p == 0``."""
    if not training or p <= 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs an rng")
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)
    return make_output("dropout", x.data * keep, (x,), lambda g: (g * keep,))
