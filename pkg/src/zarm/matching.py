"""Relevance matching of query reviews against an item document, and zero attention."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .corpus import PAD
from .numerics import ParamStore, Tensor, ops


@dataclass
class MatchParams:
    w_p: Tensor   # (d_w,) word importance
    W1: Tensor    # (hidden, 2M)
    b1: Tensor
    w2: Tensor    # (1, hidden)
    b2: Tensor    # (1,)


def init_match(store: ParamStore, prefix: str, d_w: int, M: int, hidden: int = 16) -> MatchParams:
    return MatchParams(
        w_p=store.glorot(f"{prefix}.w_p", (d_w,)),
        W1=store.glorot(f"{prefix}.W1", (hidden, 2 * M)),
        b1=store.zeros(f"{prefix}.b1", (hidden,)),
        w2=store.glorot(f"{prefix}.w2", (1, hidden)),
        b2=store.zeros(f"{prefix}.b2", (1,)),
    )


@dataclass
class MatchTrace:
    similarity: np.ndarray  # (..., M, K)
    mean: np.ndarray        # (..., M)
    max: np.ndarray
    importance: np.ndarray
    features: np.ndarray    # (..., 2M)
    alpha: np.ndarray       # (...)


def cosine_similarity_matrix(S_u: Tensor, S_i: Tensor) -> Tensor:
    """Cosine of every query word ``(..., M, d)`` with every document word ``(..., K, d)``.

    Zero (padding) vectors have similarity 0 with everything.
    """
    if S_u.shape[-1] != S_i.shape[-1]:
        raise ValueError(f"embedding widths differ: {S_u.shape} vs {S_i.shape}")
    return ops.matmul(ops.normalize(S_u), ops.swapaxes(ops.normalize(S_i), -1, -2))


def row_pool(sim: Tensor, doc_mask: np.ndarray | None = None):
    """Row-wise (mean, max) over real document columns."""
    return (ops.masked_mean(sim, doc_mask, axis=-1) if doc_mask is not None else ops.mean(sim, axis=-1),
            ops.masked_max(sim, doc_mask, axis=-1))


def word_importance(S_u: Tensor, w_p: Tensor, query_mask: np.ndarray | None = None,
                    allow_empty: bool = False) -> Tensor:
    """Softmax over query positions of ``w_p . e_j``."""
    lead, M, d = S_u.shape[:-2], S_u.shape[-2], S_u.shape[-1]
    scores = ops.reshape(ops.linear(S_u, ops.reshape(w_p, (1, d))), lead + (M,))
    return ops.softmax(scores, mask=query_mask, allow_empty=allow_empty)


def relevance_features(imp: Tensor, mean: Tensor, mx: Tensor) -> Tensor:
    return ops.concat([ops.mul(imp, mean), ops.mul(imp, mx)], axis=-1)


def relevance_score(features: Tensor, p: MatchParams) -> Tensor:
    """Two-layer scorer ``w2 . Relu(W1 I + b1) + b2``; unbounded real per query."""
    h = ops.relu(ops.linear(features, p.W1, p.b1))
    out = ops.linear(h, p.w2, p.b2)
    return ops.reshape(out, out.shape[:-1])


def match(S_u: Tensor, query_mask: np.ndarray, S_i: Tensor, doc_mask: np.ndarray, p: MatchParams,
          allow_empty_query: bool = False):
    """Score query word sequences ``(B, Q, M, d)`` against documents ``(B, K, d)``.

    Returns ``(alpha (B, Q), MatchTrace)``.
    """
    doc_mask = np.asarray(doc_mask, dtype=bool)
    if not doc_mask.any(axis=-1).all():
        raise ValueError("item document has no real words")
    sim = cosine_similarity_matrix(S_u, ops.reshape(S_i, (S_i.shape[0], 1) + S_i.shape[1:]))
    cols = doc_mask[:, None, None, :]
    mean, mx = row_pool(sim, cols)
    imp = word_importance(S_u, p.w_p, query_mask, allow_empty=allow_empty_query)
    feats = relevance_features(imp, mean, mx)
    alpha = relevance_score(feats, p)
    trace = MatchTrace(sim.data, mean.data, mx.data, imp.data, feats.data, alpha.data)
    return alpha, trace


def zero_attention(alphas: Tensor, mask: np.ndarray | None = None):
    """Softmax over ``(0, alpha_1..alpha_N)``; the leading zero score is a sink.

    Returns ``(alpha_hat_0 (...,), alpha_hat (..., N))``. Masked reviews get
    weight exactly 0; with no valid review all mass lands on the sink.
    """
    lead, n = alphas.shape[:-1], alphas.shape[-1]
    zero = Tensor(np.zeros(lead + (1,), dtype=alphas.dtype))
    aug = ops.concat([zero, alphas], axis=-1)
    if mask is None:
        aug_mask = None
    else:
        m = np.broadcast_to(np.asarray(mask, dtype=bool), lead + (n,))
        aug_mask = np.concatenate([np.ones(lead + (1,), dtype=bool), m], axis=-1)
    w = ops.softmax(aug, mask=aug_mask)
    sink = ops.reshape(ops.getitem(w, (Ellipsis, slice(0, 1))), lead)
    return sink, ops.getitem(w, (Ellipsis, slice(1, None)))


def dynamic_user(alpha_hat: Tensor, reviews: Tensor) -> Tensor:
    """Weighted sum of review vectors ``(..., N, d)``; the sink contributes the zero vector."""
    if alpha_hat.shape[-1] != reviews.shape[-2]:
        raise ValueError(f"{alpha_hat.shape[-1]} weights for {reviews.shape[-2]} reviews")
    lead = alpha_hat.shape[:-1]
    out = ops.matmul(ops.reshape(alpha_hat, lead + (1, alpha_hat.shape[-1])), reviews)
    return ops.reshape(out, lead + (reviews.shape[-1],))


def document_mask(flat: np.ndarray) -> np.ndarray:
    return np.asarray(flat) != PAD
