"""Self-attentive convolution block and additive-attention pooling.

The block is an n-gram convolution producing queries, keys and values, a
multi-head self-attention with clipped relative position embeddings, and a
position-wise feed-forward layer. Sequences are ``(..., len, d)`` arrays with
an optional boolean ``(..., len)`` mask of real positions.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .numerics import ParamStore, Tensor, ops
from .numerics.tensor import DimensionError


@dataclass
class SeqBlockParams:
    W_Q: Tensor
    b_Q: Tensor
    W_K: Tensor
    b_K: Tensor
    W_V: Tensor
    b_V: Tensor
    W_f: Tensor
    b_f: Tensor
    pos_K: Tensor | None
    pos_V: Tensor | None
    heads: int
    width: int
    clip: int

    @property
    def d_out(self) -> int:
        return self.W_Q.shape[0]

    @property
    def d_head(self) -> int:
        return self.d_out // self.heads


@dataclass
class AggregatorParams:
    W_p: Tensor
    b_p: Tensor
    h: Tensor


def init_seqblock(store: ParamStore, prefix: str, d_in: int, d_out: int, heads: int = 2,
                  width: int = 3, clip: int = 8, use_position: bool = True) -> SeqBlockParams:
    if d_out % heads:
        raise DimensionError(f"{prefix}: d_out={d_out} not divisible by heads={heads}")
    if width < 1 or width % 2 == 0:
        raise DimensionError(f"{prefix}: conv width must be odd, got {width}")
    c = width * d_in
    W_Q, b_Q = store.glorot(f"{prefix}.W_Q", (d_out, c)), store.zeros(f"{prefix}.b_Q", (d_out,))
    W_K, b_K = store.glorot(f"{prefix}.W_K", (d_out, c)), store.zeros(f"{prefix}.b_K", (d_out,))
    W_V, b_V = store.glorot(f"{prefix}.W_V", (d_out, c)), store.zeros(f"{prefix}.b_V", (d_out,))
    pos_K = pos_V = None
    if use_position:
        pos_K = store.normal(f"{prefix}.pos_K", (2 * clip + 1, d_out // heads))
        pos_V = store.normal(f"{prefix}.pos_V", (2 * clip + 1, d_out // heads))
    W_f, b_f = store.glorot(f"{prefix}.W_f", (d_out, d_out)), store.zeros(f"{prefix}.b_f", (d_out,))
    return SeqBlockParams(W_Q, b_Q, W_K, b_K, W_V, b_V, W_f, b_f, pos_K, pos_V, heads, width, clip)


def init_aggregator(store: ParamStore, prefix: str, d: int) -> AggregatorParams:
    d_p = max(1, d // 2)
    return AggregatorParams(
        W_p=store.glorot(f"{prefix}.W_p", (d_p, d)),
        b_p=store.zeros(f"{prefix}.b_p", (d_p,)),
        h=store.glorot(f"{prefix}.h", (d_p,)),
    )


def _masked_input(x: Tensor, mask: np.ndarray | None) -> Tensor:
    if mask is None:
        return x
    return ops.mul(x, np.asarray(mask, dtype=x.dtype)[..., None])


def ngram_qkv(x: Tensor, p: SeqBlockParams, mask: np.ndarray | None = None):
    """Relu(W c_j + b) for the three projections, c_j the zero-padded n-gram window at j."""
    if x.shape[-1] * p.width != p.W_Q.shape[1]:
        raise DimensionError(f"ngram_qkv: input width {x.shape[-1]} incompatible with {p.W_Q.shape}")
    c = ops.unfold(_masked_input(x, mask), p.width)
    q = ops.relu(ops.linear(c, p.W_Q, p.b_Q))
    k = ops.relu(ops.linear(c, p.W_K, p.b_K))
    v = ops.relu(ops.linear(c, p.W_V, p.b_V))
    return q, k, v


def relative_index(n: int, clip: int) -> np.ndarray:
    """``R[j, k] = clip(k - j, -clip, clip) + clip``."""
    r = np.arange(n)
    return np.clip(r[None, :] - r[:, None], -clip, clip) + clip


def _per_query_matmul(x: Tensor, table: Tensor) -> Tensor:
    """``out[..., j, :] = x[..., j, :] @ table[j]`` for x ``(X, H, n, a)``, table ``(n, a, b)``.

    Batched over the query index j so BLAS sees n matmuls instead of an einsum.
    """
    X, H, n, a = x.shape
    xt = ops.swapaxes(ops.reshape(x, (X * H, n, a)), 0, 1)        # (n, XH, a)
    out = ops.swapaxes(ops.matmul(xt, table), 0, 1)                # (XH, n, b)
    return ops.reshape(out, (X, H, n, table.shape[-1]))


def relative_self_attention(q: Tensor, k: Tensor, v: Tensor, p: SeqBlockParams,
                            mask: np.ndarray | None = None, allow_empty: bool = False,
                            return_weights: bool = False):
    """Multi-head attention with relative position terms on keys and values.

    Per head: ``e_jk = <q_j, k_k + pK[k-j]> / sqrt(d_head)``, softmax over
    unmasked ``k``, ``z_j = sum_k a_jk (v_k + pV[k-j])``; heads concatenated.
    """
    lead, n, d = q.shape[:-2], q.shape[-2], q.shape[-1]
    H = p.heads
    if d % H:
        raise DimensionError(f"attention width {d} not divisible by {H} heads")
    dh = d // H
    X = int(np.prod(lead)) if lead else 1

    def heads(t):
        return ops.swapaxes(ops.reshape(t, (X, n, H, dh)), 1, 2)  # (X, H, n, dh)

    qh, kh, vh = heads(q), heads(k), heads(v)
    scores = ops.matmul(qh, ops.swapaxes(kh, -1, -2))
    rel = relative_index(n, p.clip) if p.pos_K is not None else None
    if p.pos_K is not None:
        scores = ops.add(scores, _per_query_matmul(qh, ops.swapaxes(ops.gather(p.pos_K, rel), -1, -2)))
    scores = ops.scale(scores, 1.0 / math.sqrt(dh))

    key_mask = None
    if mask is not None:
        key_mask = np.asarray(mask, dtype=bool).reshape(X, 1, 1, n)
    a = ops.softmax(scores, mask=key_mask, allow_empty=allow_empty)
    z = ops.matmul(a, vh)
    if p.pos_V is not None:
        z = ops.add(z, _per_query_matmul(a, ops.gather(p.pos_V, rel)))
    z = ops.reshape(ops.swapaxes(z, 1, 2), lead + (n, d))
    if return_weights:
        return z, a
    return z


def position_ffn(z: Tensor, p: SeqBlockParams, mask: np.ndarray | None = None) -> Tensor:
    """Relu(W_f z_j + b_f) per position; masked positions forced to zero."""
    return _masked_input(ops.relu(ops.linear(z, p.W_f, p.b_f)), mask)


def additive_attention(z: Tensor, agg: AggregatorParams, mask: np.ndarray | None = None,
                       allow_empty: bool = False):
    """Score each position with h . Relu(W_p z_j + b_p), softmax, and pool.

    Returns ``(pooled (..., d), weights (..., len))``.
    """
    lead, n, d = z.shape[:-2], z.shape[-2], z.shape[-1]
    hidden = ops.relu(ops.linear(z, agg.W_p, agg.b_p))
    scores = ops.reshape(ops.linear(hidden, ops.reshape(agg.h, (1, -1))), lead + (n,))
    w = ops.softmax(scores, mask=mask, allow_empty=allow_empty)
    pooled = ops.matmul(ops.reshape(w, lead + (1, n)), z)
    return ops.reshape(pooled, lead + (d,)), w


def seq_encode(x: Tensor, p: SeqBlockParams, mask: np.ndarray | None = None, *,
               allow_empty: bool = False, dropout: float = 0.0,
               rng: np.random.Generator | None = None, training: bool = False) -> Tensor:
    q, k, v = ngram_qkv(x, p, mask)
    z = relative_self_attention(q, k, v, p, mask, allow_empty=allow_empty)
    z = position_ffn(z, p, mask)
    return ops.dropout(z, dropout, rng, training)
