"""Full network: static towers, relevance-matched dynamic user, prediction head, loss."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import Config
from .corpus import PAD, Batch, RatingExample, ReviewData, collate
from .hier import Tower, aggregate_static, average_embedding, embed, encode_reviews, init_tower
from .matching import MatchParams, MatchTrace, dynamic_user, init_match, match, zero_attention
from .numerics import ParamStore, Tensor, ops
from .seqblock import AggregatorParams, init_aggregator

SIGMOID_CLAMP = 1e-7


@dataclass
class AblationFlags:
    aggregator: str = "attention"
    review_encoder: str = "hierarchical"
    use_position: bool = True
    use_ui_bias: bool = True
    use_aux_loss: bool = True
    item_dynamic: bool = False

    @classmethod
    def from_config(cls, cfg: Config) -> "AblationFlags":
        return cls(cfg.aggregator, cfg.review_encoder, cfg.use_position, cfg.use_ui_bias,
                   cfg.use_aux_loss, cfg.item_dynamic)


@dataclass
class HeadParams:
    W_u_static: Tensor
    W_u_dynamic: Tensor
    b_u: Tensor
    W_i_static: Tensor
    W_i_dynamic: Tensor | None
    b_i: Tensor
    user_id: Tensor
    item_id: Tensor
    w_f: Tensor          # (1, d_latent)
    user_bias: Tensor | None
    item_bias: Tensor | None
    global_bias: Tensor  # (1,)


@dataclass
class ForwardTrace:
    prediction: np.ndarray          # (B,)
    alpha: np.ndarray               # (B, N) raw relevance scores of user reviews
    alpha_hat: np.ndarray           # (B, N)
    alpha_hat_0: np.ndarray         # (B,)
    review_mask: np.ndarray         # (B, N)
    user_static: np.ndarray
    user_dynamic: np.ndarray
    item_static: np.ndarray
    user_review_weights: np.ndarray | None
    item_review_weights: np.ndarray | None
    user_word_weights: np.ndarray | None
    user_sentence_weights: np.ndarray | None
    match: MatchTrace | None = None
    alpha_pos: np.ndarray | None = None
    alpha_neg: np.ndarray | None = None
    item_alpha_hat: np.ndarray | None = None


class ZARM:
    """Parameters and forward pass of the zero-attentive relevance matching network."""

    def __init__(self, cfg: Config, n_vocab: int, n_users: int, n_items: int,
                 rng: np.random.Generator, dtype=np.float32):
        self.cfg = cfg
        self.flags = AblationFlags.from_config(cfg)
        self.n_vocab, self.n_users, self.n_items = n_vocab, n_users, n_items
        s = self.store = ParamStore(rng, dtype)
        f = self.flags

        self.embedding = s.normal("embedding", (n_vocab, cfg.d_w), std=0.1)
        self.embedding.data[PAD] = 0.0

        hierarchical = f.review_encoder == "hierarchical"
        tower_kw = dict(heads=cfg.heads, width=cfg.width, clip=cfg.k_max, use_position=f.use_position)
        self.user_tower: Tower | None = None
        self.item_tower: Tower | None = None
        if hierarchical:
            if cfg.share_towers:
                self.user_tower = self.item_tower = init_tower(s, "tower", cfg.d_w, cfg.d_s, cfg.d_r, **tower_kw)
            else:
                self.user_tower = init_tower(s, "user_tower", cfg.d_w, cfg.d_s, cfg.d_r, **tower_kw)
                self.item_tower = init_tower(s, "item_tower", cfg.d_w, cfg.d_s, cfg.d_r, **tower_kw)
        self.d_review = cfg.d_r if hierarchical else cfg.d_w

        self.user_agg: AggregatorParams | None = None
        self.item_agg: AggregatorParams | None = None
        if f.aggregator == "attention":
            self.user_agg = init_aggregator(s, "user_review_agg", self.d_review)
            self.item_agg = init_aggregator(s, "item_review_agg", self.d_review)

        self.match: MatchParams = init_match(s, "match", cfg.d_w, cfg.M, cfg.match_hidden)
        self.item_match: MatchParams | None = None
        if f.item_dynamic:
            self.item_match = init_match(s, "item_match", cfg.d_w, cfg.M, cfg.match_hidden)

        dl, dr = cfg.d_latent, self.d_review
        self.head = HeadParams(
            W_u_static=s.glorot("head.W_u_static", (dl, dr)),
            W_u_dynamic=s.glorot("head.W_u_dynamic", (dl, dr)),
            b_u=s.zeros("head.b_u", (dl,)),
            W_i_static=s.glorot("head.W_i_static", (dl, dr)),
            W_i_dynamic=s.glorot("head.W_i_dynamic", (dl, dr)) if f.item_dynamic else None,
            b_i=s.zeros("head.b_i", (dl,)),
            user_id=s.normal("head.user_id", (n_users, dl)),
            item_id=s.normal("head.item_id", (n_items, dl)),
            w_f=s.glorot("head.w_f", (1, dl)),
            user_bias=s.zeros("head.user_bias", (n_users,)) if f.use_ui_bias else None,
            item_bias=s.zeros("head.item_bias", (n_items,)) if f.use_ui_bias else None,
            global_bias=s.zeros("head.global_bias", (1,)),
        )

    @classmethod
    def for_data(cls, cfg: Config, data: ReviewData, rng: np.random.Generator, dtype=None) -> "ZARM":
        dtype = dtype or np.dtype(cfg.precision)
        model = cls(cfg, len(data.vocab), len(data.users), len(data.items), rng, dtype)
        ratings = [data.records[k].rating for k in data.train_records]
        if ratings:
            model.head.global_bias.data[:] = np.mean(ratings)
        return model

    # ------------------------------------------------------------------ pieces

    def encode_side(self, grid, word_mask, tower: Tower | None, *, rng, training):
        emb = embed(self.embedding, grid, dropout=self.cfg.dropout_embed, rng=rng, training=training)
        if tower is None:
            return average_embedding(emb, word_mask)
        return encode_reviews(emb, word_mask, tower, dropout=self.cfg.dropout_ffn, rng=rng, training=training)

    def relevance(self, queries: np.ndarray, query_mask: np.ndarray, doc: np.ndarray,
                  doc_mask: np.ndarray, params: MatchParams | None = None):
        """Raw relevance scores of query word sequences ``(B, Q, M)`` against ``(B, K)`` documents."""
        S_u = ops.gather(self.embedding, queries, pad_index=PAD)
        S_i = ops.gather(self.embedding, doc, pad_index=PAD)
        return match(S_u, query_mask, S_i, doc_mask, params or self.match, allow_empty_query=True)

    # ------------------------------------------------------------------ forward

    def forward(self, batch: Batch, training: bool = False, rng: np.random.Generator | None = None):
        """Predicted ratings ``(B,)`` and a :class:`ForwardTrace`."""
        cfg, f = self.cfg, self.flags
        B = len(batch)
        users = self.encode_side(batch.user_grid, batch.user_word_mask, self.user_tower, rng=rng, training=training)
        items = self.encode_side(batch.item_grid, batch.item_word_mask, self.item_tower, rng=rng, training=training)
        u_static, u_w = aggregate_static(users.reviews, self.user_agg, batch.user_rev_mask)
        i_static, i_w = aggregate_static(items.reviews, self.item_agg, batch.item_rev_mask)

        item_doc = batch.item_flat.reshape(B, -1)
        alpha, mtrace = self.relevance(batch.user_flat, batch.user_flat_mask, item_doc, item_doc != PAD)
        a0, a_hat = zero_attention(alpha, batch.user_rev_mask)
        u_dynamic = dynamic_user(a_hat, users.reviews)

        i_dynamic = None
        item_a_hat = None
        if f.item_dynamic:
            user_doc = batch.user_flat.reshape(B, -1)
            ia, _ = self.relevance(batch.item_flat, batch.item_flat_mask, user_doc, user_doc != PAD,
                                   self.item_match)
            _, item_a_hat = zero_attention(ia, batch.item_rev_mask)
            i_dynamic = dynamic_user(item_a_hat, items.reviews)

        drop = lambda t: ops.dropout(t, cfg.dropout_pred, rng, training)  # noqa: E731
        u_r, i_r = feature_transform(drop(u_static), drop(u_dynamic), drop(i_static), self.head,
                                     drop(i_dynamic) if i_dynamic is not None else None)
        y_hat = predict(u_r, i_r, batch.users, batch.items, self.head)

        trace = ForwardTrace(
            prediction=y_hat.data, alpha=alpha.data, alpha_hat=a_hat.data, alpha_hat_0=a0.data,
            review_mask=batch.user_rev_mask, user_static=u_static.data, user_dynamic=u_dynamic.data,
            item_static=i_static.data,
            user_review_weights=u_w.data if u_w is not None else None,
            item_review_weights=i_w.data if i_w is not None else None,
            user_word_weights=users.word_weights, user_sentence_weights=users.sentence_weights,
            match=mtrace, item_alpha_hat=item_a_hat.data if item_a_hat is not None else None,
        )
        return y_hat, trace

    def loss(self, batch: Batch, training: bool = False, rng: np.random.Generator | None = None):
        """Summed per-example loss over the batch, with predictions and trace."""
        y_hat, trace = self.forward(batch, training, rng)
        err = ops.sub(y_hat, Tensor(batch.ratings.astype(y_hat.dtype)))
        per_example = ops.square(err)
        if self.flags.use_aux_loss:
            if batch.pos_flat is None:
                raise ValueError("auxiliary loss needs positive and negative queries in the batch")
            B = len(batch)
            queries = np.stack([batch.pos_flat, batch.neg_flat], axis=1)
            qmask = np.stack([batch.pos_mask, batch.neg_mask], axis=1)
            doc = batch.item_flat.reshape(B, -1)
            alpha, _ = self.relevance(queries, qmask, doc, doc != PAD)
            a_pos = ops.reshape(ops.getitem(alpha, (slice(None), slice(0, 1))), (B,))
            a_neg = ops.reshape(ops.getitem(alpha, (slice(None), slice(1, 2))), (B,))
            per_example = ops.sub(per_example, auxiliary_log_likelihood(a_pos, a_neg))
            trace.alpha_pos, trace.alpha_neg = a_pos.data, a_neg.data
        return ops.sum(per_example), y_hat, trace


def feature_transform(u_static: Tensor, u_dynamic: Tensor, i_static: Tensor, head: HeadParams,
                      i_dynamic: Tensor | None = None):
    """u_r = Relu([W_s, W_d][u_s; u_d] + b_u), i_r = Relu(W_i i_s (+ W_i' i_d) + b_i)."""
    u = ops.add(ops.linear(u_static, head.W_u_static, head.b_u), ops.linear(u_dynamic, head.W_u_dynamic))
    i = ops.linear(i_static, head.W_i_static, head.b_i)
    if i_dynamic is not None:
        i = ops.add(i, ops.linear(i_dynamic, head.W_i_dynamic))
    return ops.relu(u), ops.relu(i)


def predict(u_r: Tensor, i_r: Tensor, users: np.ndarray, items: np.ndarray, head: HeadParams) -> Tensor:
    """w_f . ((u_r + u_id) * (i_r + i_id)) + b_user + b_item + b_global.

    Row index -1 (unseen at training time) contributes zero id vector and bias.
    """
    users, items = np.asarray(users), np.asarray(items)
    u = ops.add(u_r, ops.gather(head.user_id, users))
    i = ops.add(i_r, ops.gather(head.item_id, items))
    y = ops.linear(ops.mul(u, i), head.w_f)
    y = ops.reshape(y, y.shape[:-1])
    if head.user_bias is not None:
        y = ops.add(y, ops.gather(head.user_bias, users))
        y = ops.add(y, ops.gather(head.item_bias, items))
    return ops.add(y, head.global_bias)


def auxiliary_log_likelihood(alpha_pos: Tensor, alpha_neg: Tensor) -> Tensor:
    """log sigma(a_pos) + log(1 - sigma(a_neg)), sigma clamped to [1e-7, 1 - 1e-7]."""
    lo, hi = SIGMOID_CLAMP, 1.0 - SIGMOID_CLAMP
    pos = ops.log(ops.clip(ops.sigmoid(alpha_pos), lo, hi))
    neg = ops.log(ops.clip(ops.sigmoid(ops.scale(alpha_neg, -1.0)), lo, hi))
    return ops.add(pos, neg)


def example_loss(model: ZARM, example: RatingExample, data: ReviewData, negative: int,
                 training: bool = False, rng: np.random.Generator | None = None):
    """Loss of one training example with a given negative-query record index."""
    loss, _, trace = model.loss(collate([example], data, [negative]), training, rng)
    return loss, trace
