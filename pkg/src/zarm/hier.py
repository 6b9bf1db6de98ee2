"""Hierarchical review encoder: words -> sentences -> reviews -> user/item vectors."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .corpus import PAD, PaddedReview
from .numerics import ParamStore, Tensor, ops
from .seqblock import (
    AggregatorParams,
    SeqBlockParams,
    additive_attention,
    init_aggregator,
    init_seqblock,
    seq_encode,
)


@dataclass
class Tower:
    """Word- and sentence-level blocks that turn one review grid into a vector."""

    word: SeqBlockParams
    word_agg: AggregatorParams
    sentence: SeqBlockParams
    sentence_agg: AggregatorParams

    @property
    def d_out(self) -> int:
        return self.sentence.d_out


def init_tower(store: ParamStore, prefix: str, d_w: int, d_s: int, d_r: int, *, heads: int,
               width: int, clip: int, use_position: bool) -> Tower:
    return Tower(
        word=init_seqblock(store, f"{prefix}.word", d_w, d_s, heads, width, clip, use_position),
        word_agg=init_aggregator(store, f"{prefix}.word_agg", d_s),
        sentence=init_seqblock(store, f"{prefix}.sentence", d_s, d_r, heads, width, clip, use_position),
        sentence_agg=init_aggregator(store, f"{prefix}.sentence_agg", d_r),
    )


@dataclass
class ReviewEncoding:
    reviews: Tensor                  # (..., d_r)
    word_weights: np.ndarray | None  # (..., T, L)
    sentence_weights: np.ndarray | None  # (..., T)


def embed(table: Tensor, indices: np.ndarray, *, dropout: float = 0.0,
          rng: np.random.Generator | None = None, training: bool = False) -> Tensor:
    return ops.dropout(ops.gather(table, indices, pad_index=PAD), dropout, rng, training)


def encode_reviews(emb: Tensor, word_mask: np.ndarray, tower: Tower, *, dropout: float = 0.0,
                   rng: np.random.Generator | None = None, training: bool = False) -> ReviewEncoding:
    """Encode embedded review grids ``(..., T, L, d_w)`` into review vectors ``(..., d_r)``.

    Fully padded sentences and reviews yield zero vectors and zero weights.
    """
    lead, T, L, d_w = emb.shape[:-3], emb.shape[-3], emb.shape[-2], emb.shape[-1]
    X = int(np.prod(lead)) if lead else 1
    wmask = np.asarray(word_mask, dtype=bool).reshape(X * T, L)
    smask = wmask.any(axis=-1).reshape(X, T)

    words = ops.reshape(emb, (X * T, L, d_w))
    z = seq_encode(words, tower.word, wmask, allow_empty=True, dropout=dropout, rng=rng, training=training)
    sent, ww = additive_attention(z, tower.word_agg, wmask, allow_empty=True)
    sent = ops.reshape(sent, (X, T, sent.shape[-1]))
    g = seq_encode(sent, tower.sentence, smask, allow_empty=True, dropout=dropout, rng=rng, training=training)
    rev, sw = additive_attention(g, tower.sentence_agg, smask, allow_empty=True)
    return ReviewEncoding(
        reviews=ops.reshape(rev, lead + (rev.shape[-1],)),
        word_weights=ww.data.reshape(lead + (T, L)),
        sentence_weights=sw.data.reshape(lead + (T,)),
    )


def average_embedding(emb: Tensor, word_mask: np.ndarray) -> ReviewEncoding:
    """Review vector as the mean of its real word embeddings (ablation variant)."""
    lead, T, L, d_w = emb.shape[:-3], emb.shape[-3], emb.shape[-2], emb.shape[-1]
    flat = ops.reshape(emb, lead + (T * L, d_w))
    m = np.asarray(word_mask, dtype=bool).reshape(lead + (T * L, 1))
    return ReviewEncoding(ops.masked_mean(flat, m, axis=-2, allow_empty=True), None, None)


def aggregate_static(reviews: Tensor, agg: AggregatorParams | None, review_mask: np.ndarray):
    """Pool review vectors ``(..., N, d)`` into one vector per user/item.

    ``agg=None`` selects coordinate-wise max pooling instead of attention.
    Returns ``(pooled, weights or None)``.
    """
    mask = np.asarray(review_mask, dtype=bool)
    if agg is None:
        return ops.masked_max(reviews, mask[..., None], axis=-2), None
    pooled, w = additive_attention(reviews, agg, mask)
    return pooled, w


# single-review conveniences ------------------------------------------------

def encode_sentence(table: Tensor, word_indices: np.ndarray, tower: Tower) -> Tensor:
    idx = np.asarray(word_indices)
    mask = idx != PAD
    z = seq_encode(embed(table, idx[None]), tower.word, mask[None], allow_empty=True)
    s, _ = additive_attention(z, tower.word_agg, mask[None], allow_empty=True)
    return ops.reshape(s, (s.shape[-1],))


def encode_review(table: Tensor, review: PaddedReview, tower: Tower) -> Tensor:
    emb = embed(table, review.grid)
    return encode_reviews(emb, review.word_mask, tower).reviews
