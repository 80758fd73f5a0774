import itertools

import numpy as np
import pytest

from metaerr.data import gen_gaussian_blobs
from metaerr.model import LayerSpec, TrainConfig, TrainedModel, predict
from metaerr.scores import ScoreVector, score_random
from metaerr.ssl import (
    SslConfig,
    SslError,
    initial_state,
    pseudo_label,
    run_ssl,
    select_by_meta,
    split_labeled_halves,
    ssl_round,
    topk_accuracy,
)


def _config(**kw):
    opts = dict(
        base_spec=LayerSpec((2, 3)),
        base_train=TrainConfig(learning_rate=0.05, epochs=5, batch_size=16),
        meta_spec=LayerSpec((2, 8, 1), "sigmoid"),
        meta_train=TrainConfig(learning_rate=0.05, epochs=5, batch_size=16, loss="meta-bce"),
        rounds=3,
        per_round_fraction=0.2,
        seed=1,
    )
    opts.update(kw)
    return SslConfig(**opts)


@pytest.fixture(scope="module")
def blobs():
    return gen_gaussian_blobs(300, 3, 2, 0.8, 2)


def _oracle_scorer(dataset):
    def scorer(base, idx):
        pred = predict(base, dataset.features[idx]).labels
        return ScoreVector("oracle", (pred == dataset.labels[idx]).astype(float))

    return scorer


class TestHalves:
    def test_even(self):
        a, b = split_labeled_halves(np.arange(10), 0)
        assert len(a) == len(b) == 5 and not set(a) & set(b)
        assert set(a) | set(b) == set(range(10))

    def test_odd(self):
        a, b = split_labeled_halves(np.arange(11), 0)
        assert (len(a), len(b)) == (6, 5)

    def test_deterministic(self):
        a1, b1 = split_labeled_halves(np.arange(20), 4)
        a2, b2 = split_labeled_halves(np.arange(20), 4)
        assert np.array_equal(a1, a2) and np.array_equal(b1, b2)

    def test_too_few(self):
        with pytest.raises(SslError):
            split_labeled_halves([3], 0)


class TestSelection:
    def test_top_k(self):
        assert set(select_by_meta(ScoreVector("m", [0.1, 0.9, 0.5]), 2).tolist()) == {1, 2}

    def test_all(self):
        assert sorted(select_by_meta(ScoreVector("m", [0.3, 0.2, 0.1]), 3).tolist()) == [0, 1, 2]

    def test_too_many(self):
        with pytest.raises(SslError):
            select_by_meta(ScoreVector("m", [0.3]), 2)

    def test_pseudo_label_zero_weights(self):
        m = TrainedModel(LayerSpec((2, 3)), (np.zeros((2, 3)),), (np.zeros(3),))
        assert np.all(pseudo_label(m, np.ones((4, 2))) == 0)

    def test_pseudo_label_needs_softmax(self):
        m = TrainedModel(LayerSpec((2, 1), "scalar"), (np.zeros((2, 1)),), (np.zeros(1),))
        with pytest.raises(SslError):
            pseudo_label(m, np.ones((1, 2)))


class TestTopK:
    def test_second_place(self):
        p = np.array([[0.5, 0.3, 0.2]])
        assert topk_accuracy(p, [1], 1) == 0.0 and topk_accuracy(p, [1], 2) == 1.0

    def test_k_equals_classes(self):
        rng = np.random.default_rng(0)
        p = rng.dirichlet(np.ones(4), 10)
        assert topk_accuracy(p, rng.integers(0, 4, 10), 4) == 1.0

    def test_enumeration_oracle(self):
        rng = np.random.default_rng(1)
        p = rng.dirichlet(np.ones(4), 4)
        p[0, 1] = p[0, 2]  # force a tie
        p[0] /= p[0].sum()
        for labels in itertools.product(range(4), repeat=4):
            for k in range(1, 5):
                hits = 0
                for row, y in zip(p, labels):
                    order = sorted(range(4), key=lambda c: (-row[c], c))
                    hits += y in order[:k]
                assert topk_accuracy(p, labels, k) == hits / 4

    def test_invalid_k(self):
        with pytest.raises(SslError):
            topk_accuracy(np.ones((1, 2)) / 2, [0], 3)


class TestConfig:
    def test_too_many_rounds(self):
        with pytest.raises(SslError):
            _config(rounds=6, per_round_fraction=0.2)

    def test_unknown_selection(self):
        with pytest.raises(SslError):
            _config(selection="margin")


class TestRounds:
    def test_growth_and_disjointness(self, blobs):
        cfg = _config()
        state = initial_state(blobs, 0.2, cfg)
        orig_idx, orig_y = state.labeled_idx.copy(), state.labeled_y.copy()
        k = int(0.2 * state.pool_size)
        for t in range(cfg.rounds):
            before = len(state.labeled_idx)
            state = ssl_round(state, cfg, blobs)
            assert len(state.labeled_idx) == before + k
            assert not set(state.labeled_idx) & set(state.unlabeled_idx)
            assert not set(state.labeled_idx) & set(state.meta_idx)
            assert not set(state.labeled_idx) & set(state.test_idx)
            # ground truth of the original base half is never overwritten
            assert np.array_equal(state.labeled_idx[:len(orig_idx)], orig_idx)
            assert np.array_equal(state.labeled_y[:len(orig_y)], orig_y)
        assert len(state.trace) == cfg.rounds

    def test_first_round_size(self, blobs):
        cfg = _config()
        state = initial_state(blobs, 0.2, cfg)
        base = len(state.labeled_idx)
        after = ssl_round(state, cfg, blobs)
        assert len(after.labeled_idx) == base + int(0.2 * state.pool_size)
        assert after.meta_model is not None

    def test_random_selection_uses_random_scores(self, blobs):
        cfg = _config(selection="random")
        state = initial_state(blobs, 0.2, cfg)
        after = ssl_round(state, cfg, blobs)
        assert after.meta_model is None
        from metaerr._rng import derive_seed

        expected = select_by_meta(score_random(state.unlabeled_idx.size, derive_seed(cfg.seed, 102, 0)),
                                  int(0.2 * state.pool_size))
        assert np.array_equal(after.labeled_idx[len(state.labeled_idx):], state.unlabeled_idx[expected])

    def test_min_one_sample(self, blobs):
        cfg = _config(rounds=1, per_round_fraction=1e-6)
        state = initial_state(blobs, 0.2, cfg)
        assert len(ssl_round(state, cfg, blobs).labeled_idx) == len(state.labeled_idx) + 1

    def test_deterministic(self, blobs):
        cfg = _config()
        a, b = run_ssl(blobs, 0.2, cfg), run_ssl(blobs, 0.2, cfg)
        assert a.to_dict() == b.to_dict()
        assert a.model.equals(b.model)

    def test_regression_rejected(self):
        from metaerr.data import gen_regression_synthetic

        with pytest.raises(SslError):
            initial_state(gen_regression_synthetic(50, 2, 0.1, 0), 0.2, _config())


class TestOracleInjection:
    def test_every_pick_correct(self, blobs):
        cfg = _config()
        state = initial_state(blobs, 0.2, cfg)
        scorer = _oracle_scorer(blobs)
        for _ in range(cfg.rounds):
            k = int(0.2 * state.pool_size)
            nxt = ssl_round(state, cfg, blobs, scorer=scorer)
            base_pred_correct = np.sum(
                predict(nxt.base_model, blobs.features[state.unlabeled_idx]).labels
                == blobs.labels[state.unlabeled_idx]
            )
            if base_pred_correct >= k:
                assert nxt.trace[-1].pseudo_correct_rate == 1.0
            state = nxt

    def test_oracle_beats_random_first_round(self):
        for seed in range(20):
            ds = gen_gaussian_blobs(200, 3, 2, 1.2, seed)
            cfg = _config(rounds=1, seed=seed)
            state = initial_state(ds, 0.2, cfg)
            oracle = ssl_round(state, cfg, ds, scorer=_oracle_scorer(ds)).trace[0]
            rand = ssl_round(state, _config(rounds=1, seed=seed, selection="random"), ds).trace[0]
            assert oracle.pseudo_correct_rate >= rand.pseudo_correct_rate
