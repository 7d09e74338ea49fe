"""Feature hashing, embedders, InfoNCE and its gradients, the optimiser and training."""

from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import sparse

from stripsearch.embedding import (
    EmbeddingVector,
    HashingEmbedder,
    LinearEmbedder,
    ModelFormatError,
    Triple,
    cosine_sim,
    embed,
    infonce_loss,
    infonce_loss_and_grad,
    infonce_sim_grads,
    train_embedder,
)
from stripsearch.features import featurize, featurize_many, term_hash, terms
from stripsearch.optim import AdamW, TrainConfig, cosine_lr

# ---------------------------------------------------------------------------
# features
# ---------------------------------------------------------------------------


class TestTerms:
    def test_identifiers_split(self):
        assert terms("xteaEncodeBlock(v3, a1);") == ["xtea", "encode", "block"]
        assert terms("compute_crc32_table") == ["compute", "crc", "table"]

    def test_strings_included(self):
        assert terms('puts("Bad checksum!")') == ["puts", "bad", "checksum"]

    def test_placeholders_dropped(self):
        assert terms("sub_100000A68(v12, a2, 0x40)") == ["sub"]

    def test_empty(self):
        assert terms("") == []


def _hand_vector(text: str, feature_dim: int, seed: int) -> np.ndarray:
    out = np.zeros(feature_dim)
    for t in terms(text):
        h = term_hash(t, seed)
        out[h % feature_dim] += -1.0 if (h >> 63) & 1 else 1.0
    n = np.linalg.norm(out)
    return out / n if n else out


class TestFeaturize:
    def test_deterministic(self):
        a, b = featurize("encrypt block with key"), featurize("encrypt block with key")
        np.testing.assert_array_equal(a.indices, b.indices)
        np.testing.assert_array_equal(a.values, b.values)

    def test_empty_degenerate(self):
        f = featurize("")
        assert f.degenerate and len(f.indices) == 0
        assert not np.any(f.dense())

    def test_matches_hand_oracle(self):
        text = "parse header parse body; checksum(\"crc table\")"
        np.testing.assert_allclose(featurize(text, 512, 3).dense(), _hand_vector(text, 512, 3), atol=1e-15)

    @given(st.integers(0, 10_000))
    @settings(max_examples=40, deadline=None)
    def test_disjoint_texts_cosine_equals_collision_oracle(self, seed):
        rng = np.random.default_rng(seed)
        words = [f"word{chr(97 + i)}{chr(97 + j)}" for i in range(26) for j in range(26)]
        picks = rng.choice(len(words), 40, replace=False)
        a = " ".join(words[i] for i in picks[:20])
        b = " ".join(words[i] for i in picks[20:])
        dim = 1 << 16
        fa, fb = featurize(a, dim), featurize(b, dim)
        oracle = float(_hand_vector(a, dim, 0) @ _hand_vector(b, dim, 0))
        assert fa.dot(fb) == pytest.approx(oracle, abs=1e-12)
        buckets_a = {term_hash(t, 0) % dim for t in terms(a)}
        buckets_b = {term_hash(t, 0) % dim for t in terms(b)}
        if not buckets_a & buckets_b:
            assert fa.dot(fb) == 0.0
        assert abs(fa.dot(fb)) <= len(buckets_a & buckets_b) / math.sqrt(len(buckets_a) * len(buckets_b)) + 1e-12

    def test_many_matches_single(self):
        texts = ["alpha beta", "", "gamma delta gamma"]
        mat, deg = featurize_many(texts, 256)
        for i, t in enumerate(texts):
            np.testing.assert_allclose(mat[i].toarray()[0], featurize(t, 256).dense())
        np.testing.assert_array_equal(deg, [False, True, False])


# ---------------------------------------------------------------------------
# embedders
# ---------------------------------------------------------------------------


class TestEmbed:
    @given(st.text(max_size=80))
    @settings(max_examples=80, deadline=None)
    def test_unit_norm(self, text):
        model = LinearEmbedder.init(256, 16, seed=1)
        v = embed(model, text)
        assert abs(np.linalg.norm(v.values) - 1.0) < 1e-6
        np.testing.assert_array_equal(v.values, embed(model, text).values)

    def test_degenerate_axis(self):
        v = embed(LinearEmbedder.init(64, 8), "")
        assert v.degenerate
        np.testing.assert_array_equal(v.values, np.eye(8)[0])

    def test_identity_weights_reproduce_features(self):
        text = "open config file and read entries"
        model = LinearEmbedder.identity(128, hash_seed=2)
        np.testing.assert_allclose(embed(model, text).values, featurize(text, 128, 2).dense(), atol=1e-12)

    def test_hashing_embedder_agrees_with_identity(self):
        texts = ["read the socket", "write to disk"]
        np.testing.assert_allclose(HashingEmbedder(64).embed_many(texts), LinearEmbedder.identity(64).embed_many(texts))

    def test_embed_many_rows_unit(self):
        e = LinearEmbedder.init(256, 32).embed_many(["a b", "", "ccc ddd"])
        np.testing.assert_allclose(np.linalg.norm(e, axis=1), 1.0, atol=1e-12)

    def test_save_load_roundtrip(self, tmp_path):
        model = LinearEmbedder.init(64, 8, hash_seed=5, seed=2)
        model.save(tmp_path / "m.npz")
        loaded = LinearEmbedder.load(tmp_path / "m.npz")
        np.testing.assert_array_equal(loaded.weights, model.weights)
        assert loaded.hash_seed == 5

    def test_load_rejects_garbage(self, tmp_path):
        (tmp_path / "bad.npz").write_bytes(b"nope")
        with pytest.raises(ModelFormatError):
            LinearEmbedder.load(tmp_path / "bad.npz")
        np.savez(tmp_path / "other.npz", format=np.array("something-else"))
        with pytest.raises(ModelFormatError):
            LinearEmbedder.load(tmp_path / "other.npz")


class TestCosine:
    def test_examples(self):
        v = EmbeddingVector(np.array([0.6, 0.8]))
        assert cosine_sim(v, v) == pytest.approx(1.0)
        assert cosine_sim(v, EmbeddingVector(-v.values)) == pytest.approx(-1.0)
        assert cosine_sim(EmbeddingVector(np.array([1.0, 0.0])), EmbeddingVector(np.array([0.0, 1.0]))) == 0.0

    def test_dim_mismatch(self):
        with pytest.raises(ValueError):
            cosine_sim(EmbeddingVector(np.array([1.0])), EmbeddingVector(np.array([1.0, 0.0])))

    def test_non_unit_rejected(self):
        with pytest.raises(ValueError):
            EmbeddingVector(np.array([1.0, 1.0]))

    @given(st.lists(st.floats(-5, 5), min_size=3, max_size=3), st.lists(st.floats(-5, 5), min_size=3, max_size=3))
    def test_symmetric(self, a, b):
        a, b = np.array(a), np.array(b)
        if np.linalg.norm(a) < 1e-3 or np.linalg.norm(b) < 1e-3:
            return
        va, vb = EmbeddingVector(a / np.linalg.norm(a)), EmbeddingVector(b / np.linalg.norm(b))
        assert cosine_sim(va, vb) == cosine_sim(vb, va)
        assert -1.0 <= cosine_sim(va, vb) <= 1.0


# ---------------------------------------------------------------------------
# InfoNCE
# ---------------------------------------------------------------------------


def _loss_oracle(pos: np.ndarray, hard: np.ndarray, tau: float) -> float:
    total = 0.0
    n = len(hard)
    for i in range(n):
        cands = [pos[i, j] for j in range(n)] + [hard[i]]
        total -= math.log(math.exp(pos[i, i] / tau) / sum(math.exp(c / tau) for c in cands))
    return total / n


class TestInfoNCE:
    def test_closed_form_single(self):
        assert infonce_loss(np.array([[1.0]]), np.array([0.0]), 1.0) == pytest.approx(math.log1p(math.exp(-1)), abs=1e-12)
        assert infonce_loss(np.array([[1.0]]), np.array([0.0]), 1.0) == pytest.approx(0.31326, abs=1e-5)

    @pytest.mark.parametrize("tau", [0.01, 0.05, 1.0, 7.0])
    def test_all_equal_is_log_candidates(self, tau):
        assert infonce_loss(np.array([[0.3]]), np.array([0.3]), tau) == pytest.approx(math.log(2))
        assert infonce_loss(np.full((4, 4), 0.2), np.full(4, 0.2), tau) == pytest.approx(math.log(5))

    def test_limit(self):
        assert infonce_loss(np.array([[1.0]]), np.array([0.0]), 0.01) < 1e-6

    def test_non_finite(self):
        with pytest.raises(ValueError):
            infonce_loss(np.array([[np.nan]]), np.array([0.0]), 1.0)
        with pytest.raises(ValueError):
            infonce_loss(np.array([[1.0]]), np.array([0.0]), 0.0)

    @given(st.integers(1, 6), st.integers(0, 10_000), st.floats(0.02, 3.0))
    @settings(max_examples=100, deadline=None)
    def test_matches_oracle_and_nonnegative(self, n, seed, tau):
        rng = np.random.default_rng(seed)
        pos, hard = rng.uniform(-1, 1, (n, n)), rng.uniform(-1, 1, n)
        loss = infonce_loss(pos, hard, tau)
        assert loss >= 0.0
        assert loss == pytest.approx(_loss_oracle(pos, hard, tau), rel=1e-9)

    @given(st.integers(1, 5), st.integers(0, 10_000), st.floats(0.02, 2.0), st.floats(0.02, 2.0))
    @settings(max_examples=100, deadline=None)
    def test_monotone_in_tau_with_margin(self, n, seed, t1, t2):
        rng = np.random.default_rng(seed)
        pos = rng.uniform(-1, 0.4, (n, n))
        pos[np.diag_indices(n)] = rng.uniform(0.5, 1.0, n)
        hard = rng.uniform(-1, 0.4, n)
        lo, hi = sorted((t1, t2))
        assert infonce_loss(pos, hard, lo) <= infonce_loss(pos, hard, hi) + 1e-12

    @given(st.integers(1, 5), st.integers(0, 10_000), st.floats(0.05, 2.0))
    @settings(max_examples=60, deadline=None)
    def test_sim_grads_finite_difference(self, n, seed, tau):
        rng = np.random.default_rng(seed)
        pos, hard = rng.uniform(-1, 1, (n, n)), rng.uniform(-1, 1, n)
        gp, gh = infonce_sim_grads(pos, hard, tau)
        h = 1e-6
        for i in range(n):
            for j in range(n):
                d = np.zeros_like(pos)
                d[i, j] = h
                num = (infonce_loss(pos + d, hard, tau) - infonce_loss(pos - d, hard, tau)) / (2 * h)
                assert gp[i, j] == pytest.approx(num, abs=1e-6)
            d = np.zeros(n)
            d[i] = h
            num = (infonce_loss(pos, hard + d, tau) - infonce_loss(pos, hard - d, tau)) / (2 * h)
            assert gh[i] == pytest.approx(num, abs=1e-6)


def _random_batch(rng: np.random.Generator, n: int, feature_dim: int):
    def rows():
        m = sparse.random(n, feature_dim, density=0.3, random_state=rng, data_rvs=rng.standard_normal).tolil()
        # guarantee every row has at least one feature
        for i in range(n):
            if not m.rows[i]:
                m[i, int(rng.integers(feature_dim))] = 1.0
        return m.tocsr()

    return rows(), rows(), rows()


def _weight_loss(model: LinearEmbedder, xq, xp, xn, tau: float) -> float:
    return infonce_loss_and_grad(model, xq, xp, xn, tau)[0]


@given(st.integers(0, 2**31), st.integers(1, 4), st.sampled_from([0.05, 0.1, 0.5, 1.0]))
@settings(max_examples=100, deadline=None)
def test_weight_gradient_finite_difference(seed, n, tau):
    rng = np.random.default_rng(seed)
    feature_dim, dim = 12, 5
    model = LinearEmbedder(rng.standard_normal((dim, feature_dim)))
    xq, xp, xn = _random_batch(rng, n, feature_dim)
    _, grad = infonce_loss_and_grad(model, xq, xp, xn, tau)
    analytic = grad.dense(feature_dim)
    numeric = np.zeros_like(analytic)
    step = 1e-5
    for r in range(dim):
        for c in range(feature_dim):
            w = model.weights
            old = w[r, c]
            w[r, c] = old + step
            up = _weight_loss(model, xq, xp, xn, tau)
            w[r, c] = old - step
            down = _weight_loss(model, xq, xp, xn, tau)
            w[r, c] = old
            numeric[r, c] = (up - down) / (2 * step)
    scale = max(np.abs(numeric).max(), 1e-3)
    assert np.abs(analytic - numeric).max() / scale < 1e-4


def test_identical_positive_and_negative_give_zero_gradient():
    model = LinearEmbedder.init(64, 8, seed=3)
    xq, _ = model.features(["sort the array"])
    xp, _ = model.features(["quick sort partition"])
    _, grad = infonce_loss_and_grad(model, xq, xp, xp, 0.1)
    np.testing.assert_allclose(grad.block, 0.0, atol=1e-12)


def test_batch_row_order_invariance():
    rng = np.random.default_rng(7)
    model = LinearEmbedder(rng.standard_normal((6, 20)))
    xq, xp, xn = _random_batch(rng, 5, 20)
    perm = rng.permutation(5)
    l1, g1 = infonce_loss_and_grad(model, xq, xp, xn, 0.2)
    l2, g2 = infonce_loss_and_grad(model, xq[perm], xp[perm], xn[perm], 0.2)
    assert l1 == pytest.approx(l2, rel=1e-12)
    np.testing.assert_allclose(g1.dense(20), g2.dense(20), atol=1e-12)


# ---------------------------------------------------------------------------
# optimiser and schedule
# ---------------------------------------------------------------------------


class TestOptim:
    def test_defaults(self):
        cfg = TrainConfig()
        assert (cfg.learning_rate, cfg.lr_min, cfg.temperature) == (1e-4, 1e-5, 0.05)
        assert (cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay) == (0.9, 0.999, 1e-8, 0.01)

    def test_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(learning_rate=1e-5, lr_min=1e-4)
        with pytest.raises(ValueError):
            TrainConfig(temperature=0.0)

    def test_cosine_endpoints(self):
        assert cosine_lr(0, 100, 1e-4, 1e-5) == 1e-4
        assert cosine_lr(99, 100, 1e-4, 1e-5) == pytest.approx(1e-5, abs=1e-9)
        assert cosine_lr(0, 1, 1e-4, 1e-5) == 1e-4
        lrs = [cosine_lr(s, 50, 1.0, 0.1) for s in range(50)]
        assert all(a >= b for a, b in zip(lrs, lrs[1:]))

    def test_zero_lr_keeps_weights(self, rng):
        w = rng.standard_normal((3, 4))
        before = w.copy()
        AdamW(w.shape, TrainConfig()).step(w, rng.standard_normal((3, 4)), 0.0)
        np.testing.assert_array_equal(w, before)

    def test_first_step_matches_reference(self, rng):
        cfg = TrainConfig()
        w = rng.standard_normal((2, 3))
        g = rng.standard_normal((2, 3))
        expected = w * (1 - 0.1 * cfg.weight_decay) - 0.1 * g / (np.abs(g) + cfg.eps)
        AdamW(w.shape, cfg).step(w, g, 0.1)
        np.testing.assert_allclose(w, expected, rtol=1e-7)

    def test_column_step_equals_dense(self, rng):
        cfg = TrainConfig()
        w1 = rng.standard_normal((3, 6))
        w2 = w1.copy()
        o1, o2 = AdamW(w1.shape, cfg), AdamW(w2.shape, cfg)
        for _ in range(3):
            cols = np.array([1, 4])
            block = rng.standard_normal((3, 2))
            dense = np.zeros((3, 6))
            dense[:, cols] = block
            o1.step(w1, block, 0.01, cols=cols)
            o2.step(w2, dense, 0.01)
        np.testing.assert_allclose(w1, w2, rtol=1e-12)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


def _word(i: int, salt: str) -> str:
    return salt + "".join(chr(97 + (i // 26**k) % 26) for k in range(3))


def _separable_triples(n: int = 48) -> list[Triple]:
    """Each query shares a private word with its positive and nothing with its negative."""
    return [
        Triple(f"{_word(i, 'find')} {_word(i, 'topic')}", f"{_word(i, 'topic')}_impl {_word(i, 'body')}", f"{_word(i + n, 'other')}_impl")
        for i in range(n)
    ]


class TestTrain:
    def test_empty(self):
        with pytest.raises(ValueError):
            train_embedder([])

    def test_loss_decreases(self):
        # Full-batch steps make the epoch loss a plain gradient-descent trace.
        cfg = TrainConfig(learning_rate=3e-3, lr_min=1e-3, epochs=8, batch_size=48, temperature=0.1)
        res = train_embedder(_separable_triples(), cfg, feature_dim=1024, dim=16)
        losses = res.epoch_losses
        assert all(b < a + 1e-6 for a, b in zip(losses, losses[1:]))
        assert losses[-1] < losses[0]

    def test_schedule_endpoints_default(self):
        res = train_embedder(_separable_triples(20), TrainConfig(epochs=2, batch_size=4), feature_dim=64, dim=4)
        assert res.lrs[0] == 1e-4
        assert res.lrs[-1] == pytest.approx(1e-5, abs=1e-9)
        assert len(res.lrs) == 2 * 5

    def test_deterministic(self):
        cfg = TrainConfig(learning_rate=1e-2, lr_min=1e-3, epochs=2, batch_size=8, seed=4)
        a = train_embedder(_separable_triples(), cfg, feature_dim=256, dim=8)
        b = train_embedder(_separable_triples(), cfg, feature_dim=256, dim=8)
        np.testing.assert_array_equal(a.model.weights, b.model.weights)
        assert a.epoch_losses == b.epoch_losses

    def test_given_model_not_mutated(self):
        model = LinearEmbedder.init(128, 8, seed=1)
        before = model.weights.copy()
        train_embedder(_separable_triples(16), TrainConfig(learning_rate=1e-2, lr_min=1e-3, epochs=1), model=model)
        np.testing.assert_array_equal(model.weights, before)

    def test_training_improves_retrieval(self):
        triples = _separable_triples()
        cfg = TrainConfig(learning_rate=1e-2, lr_min=1e-3, epochs=8, batch_size=8, temperature=0.1)
        res = train_embedder(triples, cfg, feature_dim=512, dim=16)
        q = res.model.embed_many([t.query for t in triples])
        p = res.model.embed_many([t.positive for t in triples])
        n = res.model.embed_many([t.hard_negative for t in triples])
        assert np.mean(np.sum(q * p, axis=1) > np.sum(q * n, axis=1)) == 1.0
