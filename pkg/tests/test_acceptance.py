"""Acceptance suite: one test per criterion, each reported as a PASS/FAIL line in the summary."""
import dataclasses
import itertools
import math
import time

import numpy as np
import pytest

from conftest import small_config
from oracles import match_oracle, zero_attention_oracle
from zarm.checkpoint import read_checkpoint
from zarm.cli import _restore, load_data, main, run_gradcheck
from zarm.config import ABLATIONS, Config, load_config
from zarm.corpus import collate, sample_negative
from zarm.hier import encode_review, init_tower
from zarm.matching import dynamic_user, init_match, match, zero_attention
from zarm.model import ZARM
from zarm.numerics import ParamStore, Tensor, no_record
from zarm.seqblock import additive_attention, init_aggregator, ngram_qkv, relative_self_attention

SMALL = dict(d_w=8, d_s=8, d_r=8, d_latent=4, match_hidden=4, T=3, L=6, M=8, N=3, k_max=4, batch_size=8)

# learning-sanity run: lr 0.001, dropout off so the train error can reach the floor
OVERFIT = dict(d_w=16, d_s=16, d_r=16, d_latent=8, T=3, L=10, M=16, batch_size=8, epochs=200, lr=0.001,
               dropout_embed=0.0, dropout_ffn=0.0, dropout_pred=0.0, precision="float64")


def cfg_text(**values) -> str:
    return "".join(f"{k} = {v}\n" for k, v in values.items())


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


# ------------------------------------------------------------------ 1

def test_criterion_1_gradient_correctness(record_property):
    start = time.perf_counter()
    report = run_gradcheck(Config(), tol=1e-4, h=1e-5)
    seconds = time.perf_counter() - start
    worst = report.worst
    record_property("detail", f"worst {worst.path} rel={worst.max_rel_error:.2e} over "
                              f"{len(report.tensors)} tensors in {seconds:.0f}s")
    assert report.passed, report.failures()
    assert seconds < 300


# ------------------------------------------------------------------ 2

def test_criterion_2_zero_attention_algebra(record_property):
    rng = np.random.default_rng(2)
    worst_sum, saturated = 0.0, 0
    for _ in range(1000):
        n = int(rng.integers(1, 11))
        # a fifth of the vectors land in the all-irrelevant regime
        hi = 40.0 if rng.random() < 0.8 else -30.0
        alphas = rng.uniform(-40, hi, n)
        a0, ah = zero_attention(Tensor(alphas))
        a0, ah = float(a0.data), ah.data
        assert a0 >= 0 and np.all(ah >= 0)
        worst_sum = max(worst_sum, abs(a0 + ah.sum() - 1.0))
        r0, rk = zero_attention_oracle(list(alphas))
        assert abs(a0 - r0) < 1e-12 and np.allclose(ah, rk, rtol=0, atol=1e-12)

        k = int(rng.integers(n))
        bumped = alphas.copy()
        bumped[k] += rng.uniform(0.1, 2.0)
        b0, bh = zero_attention(Tensor(bumped))
        b0, bh = float(b0.data), bh.data
        assert bh[k] >= ah[k] and b0 <= a0
        assert np.all(np.delete(bh, k) <= np.delete(ah, k))
        if 1e-6 < ah[k] < 1 - 1e-6:
            assert bh[k] > ah[k]

        if np.all(alphas <= -30):
            saturated += 1
            assert a0 >= 1 - 1e-9
            r = rng.normal(scale=rng.uniform(0.1, 10), size=(n, 5))
            u = dynamic_user(Tensor(ah), Tensor(r)).data
            assert np.abs(u).max() <= 1e-9 * n * np.abs(r).max()
    record_property("detail", f"max |sum-1|={worst_sum:.1e}, {saturated} all-irrelevant cases")
    assert worst_sum <= 1e-6 and saturated > 100


# ------------------------------------------------------------------ 3

def test_criterion_3_matching_oracle(record_property):
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(100):
        d, M, N = int(rng.integers(1, 9)), int(rng.integers(1, 7)), int(rng.integers(1, 4))
        K = int(rng.integers(1, M * 3 + 1))
        store = ParamStore(np.random.default_rng(int(rng.integers(1 << 30))), np.float64)
        p = init_match(store, "m", d, M, int(rng.integers(1, 9)))
        for _, t in store.items():
            t.data = rng.normal(size=t.shape)
        qmask = rng.random((1, N, M)) < 0.75
        qmask[0, :, 0] = True
        dmask = rng.random((1, K)) < 0.75
        dmask[0, int(rng.integers(K))] = True
        S_u = rng.normal(size=(1, N, M, d)) * qmask[..., None]
        S_i = rng.normal(size=(1, K, d)) * dmask[..., None]
        alpha, tr = match(Tensor(S_u), qmask, Tensor(S_i), dmask, p)
        sim = tr.similarity[0]
        assert np.all(np.abs(sim) <= 1.0)
        assert np.all(tr.max[0] >= tr.mean[0])
        for k in range(N):
            ref = match_oracle(S_u[0, k], S_i[0], dmask[0], qmask[0, k], p.w_p.data, p.W1.data, p.b1.data,
                               p.w2.data[0], float(p.b2.data[0]))
            for got, key in ((sim[k], "similarity"), (tr.mean[0, k], "mean"), (tr.max[0, k], "max"),
                             (tr.importance[0, k], "importance"), (tr.features[0, k], "features")):
                worst = max(worst, float(np.abs(got - np.asarray(ref[key])).max()))
            worst = max(worst, abs(float(alpha.data[0, k]) - ref["alpha"]))
    record_property("detail", f"max deviation from scalar oracle {worst:.1e}")
    assert worst < 1e-10


# ------------------------------------------------------------------ 4

def test_criterion_4_attention_normalization(record_property):
    rng = np.random.default_rng(4)
    store = ParamStore(np.random.default_rng(4), np.float64)
    tower = init_tower(store, "t", 6, 6, 6, heads=2, width=3, clip=4, use_position=True)
    review_agg = init_aggregator(store, "r", 6)
    kinds = ("word", "sentence", "review", "zero")
    worst, counts = 0.0, dict.fromkeys(kinds, 0)

    def check(w, mask):
        nonlocal worst
        w = np.asarray(w)
        assert np.all(w[..., ~mask] == 0.0)
        worst = max(worst, float(np.abs(w.sum(-1) - 1.0).max()))

    for trial in range(1000):
        kind = kinds[trial % 4]
        n = int(rng.integers(1, 11))
        mask = rng.random(n) < 0.6
        mask[int(rng.integers(n))] = True
        x = rng.normal(scale=3.0, size=(1, n, 6))
        if kind == "word":
            q, k, v = ngram_qkv(Tensor(x), tower.word, mask[None])
            _, a = relative_self_attention(q, k, v, tower.word, mask[None], return_weights=True)
            check(a.data, mask)
            _, w = additive_attention(Tensor(x), tower.word_agg, mask[None])
        elif kind == "sentence":
            _, w = additive_attention(Tensor(x), tower.sentence_agg, mask[None])
        elif kind == "review":
            _, w = additive_attention(Tensor(x), review_agg, mask[None])
        else:
            a0, ah = zero_attention(Tensor(rng.uniform(-40, 40, n)), mask)
            assert np.all(ah.data[~mask] == 0.0)
            worst = max(worst, abs(float(a0.data) + ah.data.sum() - 1.0))
            counts[kind] += 1
            continue
        check(w.data, mask)
        counts[kind] += 1
    record_property("detail", f"max |sum-1|={worst:.1e} over {sum(counts.values())} instances")
    assert worst <= 1e-6 and sum(counts.values()) == 1000


# ------------------------------------------------------------------ 5

USER_FIELDS = ("user_grid", "user_word_mask", "user_sent_mask", "user_rev_mask", "user_flat", "user_flat_mask")


def test_criterion_5_permutation_invariance(record_property):
    worst = 0.0
    for aggregator in ("attention", "max_pool"):
        cfg = small_config(aggregator=aggregator)
        data = load_data(cfg, synthetic_fallback=True)
        model = ZARM.for_data(cfg, data, np.random.default_rng(5))
        batch = collate(data.train[:6], data)
        with no_record():
            _, base = model.forward(batch)
            for perm in itertools.permutations(range(data.N)):
                for name in USER_FIELDS:
                    setattr(batch, name, getattr(batch, name)[:, list(perm)])
                _, tr = model.forward(batch)
                worst = max(worst, float(np.abs(tr.user_static - base.user_static).max()),
                            float(np.abs(tr.user_dynamic - base.user_dynamic).max()))
                inverse = np.argsort(perm)
                for name in USER_FIELDS:
                    setattr(batch, name, getattr(batch, name)[:, inverse])

    cfg = small_config()
    data = load_data(cfg, synthetic_fallback=True)
    model = ZARM.for_data(cfg, data, np.random.default_rng(5))
    assert np.abs(model.user_tower.word.pos_K.data).max() > 0
    review = data.reviews[data.train_records[0]]
    row = int(np.flatnonzero(review.word_mask.sum(-1) >= 2)[0])
    swapped = dataclasses.replace(review, grid=review.grid.copy())
    a, b = np.flatnonzero(review.grid[row])[:2]
    assert review.grid[row, a] != review.grid[row, b]
    swapped.grid[row, [a, b]] = swapped.grid[row, [b, a]]
    with no_record():
        change = float(np.abs(encode_review(model.embedding, swapped, model.user_tower).data
                              - encode_review(model.embedding, review, model.user_tower).data).max())
    record_property("detail", f"permutation drift {worst:.1e}, word-swap change {change:.1e}")
    assert worst <= 1e-6 and change >= 1e-6


# ------------------------------------------------------------------ 6 / 7

@pytest.fixture(scope="module")
def overfit_run(tmp_path_factory, synthetic_path):
    root = tmp_path_factory.mktemp("overfit")
    cfg_path = root / "overfit.cfg"
    cfg_path.write_text(cfg_text(**OVERFIT))
    out = root / "run"
    start = time.perf_counter()
    code = main(["train", "--config", str(cfg_path), "--corpus", str(synthetic_path), "--out", str(out),
                 "--workers", "1"])
    return out, code, time.perf_counter() - start


def test_criterion_6_learning_sanity(overfit_run, capsys, record_property):
    out, code, seconds = overfit_run
    assert code == 0
    capsys.readouterr()
    assert main(["eval", "--config", str(out / "config.cfg"), "--checkpoint", str(out / "last.ckpt"),
                 "--split", "train"]) == 0
    printed = capsys.readouterr().out.splitlines()
    mse = float(printed[0].split("=")[1])
    record_property("detail", f"train mse={mse:.4f} after 200 epochs in {seconds:.0f}s")
    assert mse < 0.05 and seconds < 600


def test_criterion_7_auxiliary_discrimination(overfit_run, record_property):
    out, code, _ = overfit_run
    assert code == 0
    cfg = load_config(out / "config.cfg").validate()
    data = load_data(cfg)
    model = _restore(cfg, data, str(out / "last.ckpt"))
    rng = np.random.default_rng(7)
    recs = [data.records[k] for k in data.train_records]
    negs = [data.train_records[sample_negative(e.user_id, e.item_id, recs, rng)] for e in data.train]
    with no_record():
        _, _, trace = model.loss(collate(data.train, data, negs))
    gap = float(sigmoid(trace.alpha_pos).mean() - sigmoid(trace.alpha_neg).mean())
    record_property("detail", f"mean sigma(pos) - mean sigma(neg) = {gap:.3f}")
    assert gap >= 0.2


# ------------------------------------------------------------------ 8

def inventory_change(name, paths, base):
    """Whether the parameter inventory reflects the ablation ``name``."""
    gone, new = base - paths, paths - base
    if name == "max_pool_aggregator":
        return bool(gone) and all("review_agg" in p for p in gone) and not new
    if name == "avg_embedding":
        return bool(gone) and all(p.split(".")[0] in ("user_tower", "item_tower") for p in gone) and not new
    if name == "remove_position":
        return bool(gone) and all(p.endswith((".pos_K", ".pos_V")) for p in gone) and not new
    if name == "remove_ui_bias":
        return gone == {"head.user_bias", "head.item_bias"} and not new
    if name == "remove_aux_loss":
        return paths == base
    if name == "add_item_dynamic":
        return not gone and "head.W_i_dynamic" in new and all(
            p == "head.W_i_dynamic" or p.startswith("item_match.") for p in new)
    raise AssertionError(name)


def test_criterion_8_ablation_plumbing(tmp_path, synthetic_path, record_property):
    cfg_path = tmp_path / "small.cfg"
    cfg_path.write_text(cfg_text(**SMALL, epochs=5))
    base = set(ZARM.for_data(small_config(), load_data(small_config(), synthetic_fallback=True),
                             np.random.default_rng(0)).store.paths())
    ok = []
    for name, (key, value) in ABLATIONS.items():
        out = tmp_path / name
        code = main(["train", "--config", str(cfg_path), "--corpus", str(synthetic_path), "--out", str(out),
                     "--ablation", name])
        echoed = load_config(out / "config.cfg")
        rows = (out / "metrics.csv").read_text().splitlines()
        _, values = read_checkpoint(out / "last.ckpt")
        good = (code == 0 and getattr(echoed, key) == value and len(rows) == 6
                and inventory_change(name, set(values), base))
        ok.append((name, good))
    record_property("detail", ", ".join(f"{n}={'ok' if g else 'BAD'}" for n, g in ok))
    assert all(g for _, g in ok), ok


# ------------------------------------------------------------------ 9

def test_criterion_9_determinism(tmp_path, synthetic_path, record_property):
    cfg_path = tmp_path / "det.cfg"
    cfg_path.write_text(cfg_text(**SMALL, epochs=3, precision="float64", record_seconds="false"))
    blobs = []
    for run in ("a", "b"):
        out = tmp_path / run
        assert main(["train", "--config", str(cfg_path), "--corpus", str(synthetic_path), "--out", str(out)]) == 0
        blobs.append((out / "metrics.csv").read_bytes())
    record_property("detail", f"{len(blobs[0])}-byte metrics files, identical={blobs[0] == blobs[1]}")
    assert blobs[0] == blobs[1] and math.isfinite(float(blobs[0].splitlines()[-1].split(b",")[2]))
