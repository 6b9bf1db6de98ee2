import math

import numpy as np
import pytest

from oracles import match_oracle, zero_attention_oracle
from zarm.matching import (
    cosine_similarity_matrix,
    dynamic_user,
    init_match,
    match,
    relevance_features,
    relevance_score,
    row_pool,
    word_importance,
    zero_attention,
)
from zarm.numerics import EmptySupportError, ParamStore, Tensor, grad_check, ops


def params(d=4, M=3, hidden=5, seed=0):
    store = ParamStore(np.random.default_rng(seed), np.float64)
    p = init_match(store, "m", d, M, hidden)
    rng = np.random.default_rng(seed + 1)
    for _, t in store.items():
        t.data = rng.normal(size=t.shape)
    return store, p


# ------------------------------------------------------------------ similarity

def test_orthonormal_identity():
    e = np.eye(2)
    np.testing.assert_allclose(cosine_similarity_matrix(Tensor(e), Tensor(e)).data, np.eye(2), atol=1e-15)


def test_zero_column_gives_zero_entries():
    rng = np.random.default_rng(0)
    S_u, S_i = rng.normal(size=(3, 4)), rng.normal(size=(5, 4))
    S_u[1] = 0
    S_i[2] = 0
    sim = cosine_similarity_matrix(Tensor(S_u), Tensor(S_i)).data
    assert np.all(sim[1] == 0.0) and np.all(sim[:, 2] == 0.0)


def test_similarity_scalar_oracle():
    from oracles import cosine
    rng = np.random.default_rng(1)
    S_u, S_i = rng.normal(size=(3, 4)), rng.normal(size=(8, 4))
    sim = cosine_similarity_matrix(Tensor(S_u), Tensor(S_i)).data
    for a in range(3):
        for b in range(8):
            assert abs(sim[a, b] - cosine(S_u[a], S_i[b])) < 1e-12


def test_similarity_width_mismatch():
    with pytest.raises(ValueError):
        cosine_similarity_matrix(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 4))))


# ------------------------------------------------------------------ pooling / importance / score

def test_row_pool_identity_and_constant():
    mean, mx = row_pool(Tensor(np.eye(2)))
    np.testing.assert_allclose(mean.data, [0.5, 0.5])
    np.testing.assert_allclose(mx.data, [1.0, 1.0])
    mean, mx = row_pool(Tensor(np.full((2, 3), 0.3)))
    np.testing.assert_allclose(mean.data, 0.3)
    np.testing.assert_allclose(mx.data, 0.3)


def test_row_pool_excludes_pad_columns():
    rng = np.random.default_rng(2)
    sim = rng.uniform(-1, 1, size=(3, 6))
    cols = np.array([True, False, True, True, False, True])
    mean, mx = row_pool(Tensor(sim), cols)
    np.testing.assert_allclose(mean.data, sim[:, cols].mean(1), atol=1e-15)
    np.testing.assert_array_equal(mx.data, sim[:, cols].max(1))


def test_importance_uniform_and_single():
    S = np.random.default_rng(3).normal(size=(4, 3))
    imp = word_importance(Tensor(S), Tensor(np.zeros(3)), np.array([True, True, False, True]))
    np.testing.assert_allclose(imp.data, [1 / 3, 1 / 3, 0, 1 / 3], atol=1e-15)
    imp = word_importance(Tensor(S), Tensor(np.ones(3)), np.array([False, True, False, False]))
    np.testing.assert_array_equal(imp.data, [0, 1, 0, 0])


def test_importance_empty_support():
    with pytest.raises(EmptySupportError):
        word_importance(Tensor(np.ones((2, 3))), Tensor(np.ones(3)), np.zeros(2, dtype=bool))


def test_score_zero_input_and_constant_bias():
    _, p = params()
    p.b1.data[:] = 0
    p.b2.data[:] = 0
    assert float(relevance_score(Tensor(np.zeros(6)), p).data) == 0.0
    p.W1.data[:] = 0
    p.b2.data[:] = 1.5
    x = np.random.default_rng(4).normal(size=6)
    assert float(relevance_score(Tensor(x), p).data) == 1.5


@pytest.mark.parametrize("seed", range(10))
def test_match_end_to_end_oracle(seed):
    rng = np.random.default_rng(seed)
    d, M, N = 4, 3, 2
    _, p = params(d, M, seed=seed)
    S_u = rng.normal(size=(1, N, M, d))
    qmask = rng.random((1, N, M)) < 0.8
    qmask[..., 0] = True
    S_u = S_u * qmask[..., None]
    S_i = rng.normal(size=(1, M * N, d))
    dmask = rng.random((1, M * N)) < 0.7
    dmask[0, 0] = True
    S_i = S_i * dmask[..., None]
    alpha, tr = match(Tensor(S_u), qmask, Tensor(S_i), dmask, p)
    for k in range(N):
        ref = match_oracle(S_u[0, k], S_i[0], dmask[0], qmask[0, k], p.w_p.data, p.W1.data, p.b1.data,
                           p.w2.data[0], float(p.b2.data[0]))
        np.testing.assert_allclose(tr.similarity[0, k], ref["similarity"], atol=1e-10)
        np.testing.assert_allclose(tr.mean[0, k], ref["mean"], atol=1e-10)
        np.testing.assert_allclose(tr.max[0, k], ref["max"], atol=1e-10)
        np.testing.assert_allclose(tr.importance[0, k], ref["importance"], atol=1e-10)
        np.testing.assert_allclose(tr.features[0, k], ref["features"], atol=1e-10)
        assert abs(alpha.data[0, k] - ref["alpha"]) < 1e-10


def test_match_rejects_empty_document():
    _, p = params()
    with pytest.raises(ValueError):
        match(Tensor(np.ones((1, 1, 3, 4))), np.ones((1, 1, 3), bool), Tensor(np.zeros((1, 2, 4))),
              np.zeros((1, 2), bool), p)


def test_features_layout():
    imp, mean, mx = Tensor([0.5, 0.5]), Tensor([0.2, 0.4]), Tensor([1.0, 0.8])
    np.testing.assert_allclose(relevance_features(imp, mean, mx).data, [0.1, 0.2, 0.5, 0.4])


# ------------------------------------------------------------------ zero attention

def za(values, mask=None):
    a0, ah = zero_attention(Tensor(np.asarray(values, dtype=np.float64)), mask)
    return float(a0.data), ah.data


def test_zero_attention_examples():
    a0, ah = za([0.0])
    assert a0 == 0.5 and ah[0] == 0.5
    a0, ah = za([-30.0, -30.0])
    assert a0 >= 1 - 1e-9 and np.all(ah <= 1e-13)
    a0, ah = za([math.log(3)])
    assert abs(ah[0] - 0.75) < 1e-15 and abs(a0 - 0.25) < 1e-15


def test_zero_attention_no_valid_review():
    a0, ah = za([1.0, 2.0], np.array([False, False]))
    assert a0 == 1.0 and np.all(ah == 0.0)


@pytest.mark.parametrize("seed", range(20))
def test_zero_attention_oracle(seed):
    rng = np.random.default_rng(seed)
    alphas = rng.uniform(-40, 40, size=rng.integers(1, 8))
    a0, ah = za(alphas)
    r0, rk = zero_attention_oracle(list(alphas))
    assert abs(a0 - r0) < 1e-12
    np.testing.assert_allclose(ah, rk, atol=1e-12)


def test_zero_attention_monotone():
    rng = np.random.default_rng(0)
    alphas = rng.normal(size=5)
    a0, ah = za(alphas)
    for k in range(5):
        bumped = alphas.copy()
        bumped[k] += 0.1
        b0, bh = za(bumped)
        assert bh[k] > ah[k] and b0 < a0


def test_dynamic_user_degenerates_to_zero():
    rng = np.random.default_rng(1)
    r = rng.normal(size=(4, 3))
    _, ah = zero_attention(Tensor(np.full(4, -31.0)))
    u = dynamic_user(ah, Tensor(r)).data
    assert np.abs(u).max() <= 1e-9 * 4 * np.abs(r).max()


def test_dynamic_user_single_confident_review():
    r = np.random.default_rng(2).normal(size=(1, 3))
    _, ah = zero_attention(Tensor([10.0]))
    np.testing.assert_allclose(dynamic_user(ah, Tensor(r)).data, r[0], rtol=1e-4)


def test_dynamic_user_oracle_and_permutation():
    rng = np.random.default_rng(3)
    alphas, r = rng.normal(size=5), rng.normal(size=(5, 3))
    _, ah = zero_attention(Tensor(alphas))
    u = dynamic_user(ah, Tensor(r)).data
    _, w = zero_attention_oracle(list(alphas))
    for t in range(3):
        assert abs(u[t] - sum(w[k] * r[k, t] for k in range(5))) < 1e-12
    perm = rng.permutation(5)
    _, ahp = zero_attention(Tensor(alphas[perm]))
    np.testing.assert_allclose(dynamic_user(ahp, Tensor(r[perm])).data, u, atol=1e-6)


def test_dynamic_user_length_mismatch():
    with pytest.raises(ValueError):
        dynamic_user(Tensor(np.ones(2)), Tensor(np.ones((3, 4))))


# ------------------------------------------------------------------ gradients

def test_matching_path_gradcheck():
    store, p = params(seed=5)
    rng = np.random.default_rng(5)
    S_u = store.add("S_u", rng.normal(size=(2, 2, 3, 4)))
    S_i = store.add("S_i", rng.normal(size=(2, 6, 4)))
    qmask = np.ones((2, 2, 3), bool)
    dmask = np.ones((2, 6), bool)
    r = rng.normal(size=(2, 2, 4))

    def loss():
        alpha, _ = match(S_u, qmask, S_i, dmask, p)
        _, ah = zero_attention(alpha)
        return ops.sum(ops.square(dynamic_user(ah, Tensor(r))))

    report = grad_check(store, loss)
    assert report.passed, report.failures()
