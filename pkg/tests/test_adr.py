import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from metaerr.adr import (
    DEFAULT_RATES,
    AdrError,
    AdrTable,
    adr_curve,
    aggregate_tables,
    metric_at_dr,
    oracle_score,
    prefix_size,
    rank_by_confidence,
)
from metaerr.scores import ScoreVector


def _subset_matrix(n):
    """All 2^n subsets of range(n) as 0/1 rows."""
    return np.array(list(itertools.product((0, 1), repeat=n)), dtype=np.int64)


class TestRanking:
    def test_reference(self):
        np.testing.assert_array_equal(rank_by_confidence([0.2, 0.9, 0.5]), [1, 2, 0])

    def test_ties_keep_index_order(self):
        np.testing.assert_array_equal(rank_by_confidence([0.3] * 5), np.arange(5))
        np.testing.assert_array_equal(rank_by_confidence([0.1, 0.5, 0.1, 0.5]), [1, 3, 0, 2])

    def test_matches_comparison_sort(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            s = rng.integers(0, 4, 6).astype(float)
            expected = sorted(range(6), key=lambda i: (-s[i], i))
            assert rank_by_confidence(s).tolist() == expected

    def test_nan_rejected(self):
        with pytest.raises(AdrError):
            rank_by_confidence([0.1, np.nan])

    @settings(max_examples=60, deadline=None)
    @given(arrays(np.int64, st.integers(1, 30), elements=st.integers(-20, 20)))
    def test_monotone_transform_keeps_permutation(self, s):
        # transforms chosen to stay strictly increasing after float rounding
        s = s.astype(np.float64)
        perm = rank_by_confidence(s)
        np.testing.assert_array_equal(perm, rank_by_confidence(np.exp(s) * 3 + 1))
        np.testing.assert_array_equal(perm, rank_by_confidence(2.0 * s))


class TestPrefix:
    def test_ceil(self):
        assert prefix_size(0.1, 5) == 1
        assert prefix_size(0.25, 10) == 3
        assert prefix_size(1.0, 7) == 7

    def test_float_noise_ignored(self):
        # 0.7 * 10 evaluates to 7.000000000000001
        assert prefix_size(0.7, 10) == 7
        assert all(prefix_size(r, 100) == round(r * 100) for r in DEFAULT_RATES)

    @pytest.mark.parametrize("d", [0.0, -0.1, 1.1])
    def test_invalid_rate(self, d):
        with pytest.raises(AdrError):
            prefix_size(d, 10)

    def test_metric_examples(self):
        assert metric_at_dr([0, 1, 2, 3], [1, 1, 0, 1], 0.5) == 1.0
        assert metric_at_dr([0, 1, 2, 3], [1, 1, 0, 1], 1.0) == 0.75

    def test_enumerated_oracle_prefixes(self):
        n, a = 10, 0.7
        correct = np.array([1] * 7 + [0] * 3, dtype=float)
        rng = np.random.default_rng(0)
        correct = correct[rng.permutation(n)]
        perm = rank_by_confidence(oracle_score(correct))
        assert metric_at_dr(perm, correct, 0.7) == 1.0
        assert metric_at_dr(perm, correct, 1.0) == 0.7
        for m in range(1, n + 1):
            d = m / n
            assert metric_at_dr(perm, correct, d) == pytest.approx(min(1.0, a * n / math.ceil(d * n)), abs=1e-15)

    @settings(max_examples=60, deadline=None)
    @given(arrays(np.float64, st.integers(1, 40), elements=st.sampled_from([0.0, 1.0])),
           st.sampled_from(DEFAULT_RATES), st.integers(0, 1000))
    def test_accuracy_count_is_integer(self, correct, d, seed):
        perm = np.random.default_rng(seed).permutation(correct.size)
        k = prefix_size(d, correct.size)
        v = metric_at_dr(perm, correct, d)
        assert abs(v * k - round(v * k)) < 1e-9


class TestAdrCurve:
    def test_single_cell(self):
        s = ScoreVector("x", [0.9, 0.1, 0.5])
        t = adr_curve([s], [1.0, 0.0, 1.0], rates=(0.5,))
        assert t.values.shape == (1, 1)
        assert t.values[0, 0] == metric_at_dr(rank_by_confidence(s), [1.0, 0.0, 1.0], 0.5)

    def test_rate_one_bit_equal(self):
        rng = np.random.default_rng(1)
        m = rng.random(333) ** 2
        sets = [ScoreVector(f"s{i}", rng.random(333)) for i in range(6)] + [oracle_score(m, "mse")]
        t = adr_curve(sets, m, metric="mse")
        last = t.values[:, -1]
        assert np.all(last == last[0])
        assert last[0] == math.fsum(m) / m.size

    def test_length_mismatch(self):
        with pytest.raises(AdrError):
            adr_curve([ScoreVector("x", [1.0, 2.0])], [1.0, 0.0, 1.0])

    def test_unknown_metric(self):
        with pytest.raises(AdrError):
            adr_curve([ScoreVector("x", [1.0])], [1.0], metric="f1")

    def test_oracle_examples(self):
        assert rank_by_confidence(oracle_score([0, 1, 1]))[:2].tolist() == [1, 2]
        t = adr_curve([oracle_score(np.ones(8))], np.ones(8))
        assert np.all(t.values == 1.0)

    def test_oracle_mse_puts_small_errors_first(self):
        assert rank_by_confidence(oracle_score([4.0, 0.5, 1.0], "mse")).tolist() == [1, 2, 0]

    @pytest.mark.parametrize("n", [1, 4, 7, 8])
    def test_oracle_dominates_brute_force(self, n):
        subsets = _subset_matrix(n)
        sizes = subsets.sum(axis=1)
        vectors = subsets.astype(float)
        # hits[s, v] = number of correct samples of vector v inside subset s
        hits = subsets @ vectors.T
        rng = np.random.default_rng(n)
        for v, correct in enumerate(vectors):
            perm = rank_by_confidence(oracle_score(correct))
            other = rank_by_confidence(rng.random(n))
            for m in range(1, n + 1):
                d = m / n
                best = hits[sizes == m, v].max() / m
                assert metric_at_dr(perm, correct, d) == best
                assert metric_at_dr(other, correct, d) <= best


class TestTableIo:
    def _table(self):
        return AdrTable((0.5, 1.0), ("a", "b"), np.array([[0.9, 0.7], [0.8, 0.7]]), "accuracy", 10)

    def test_csv_round_trip(self, tmp_path):
        t = self._table()
        t.to_csv(tmp_path / "t.csv")
        assert (tmp_path / "t.csv").read_text().splitlines()[0] == "rate,a,b"
        back = AdrTable.from_csv(tmp_path / "t.csv", "accuracy", 10)
        np.testing.assert_array_equal(back.values, t.values)
        assert back.methods == t.methods and back.rates == t.rates

    def test_transposed(self, tmp_path):
        self._table().to_csv(tmp_path / "t.csv", transposed=True)
        assert (tmp_path / "t.csv").read_text().splitlines() == ["method,0.5,1.0", "a,0.9,0.7", "b,0.8,0.7"]

    def test_json(self, tmp_path):
        import json

        self._table().to_json(tmp_path / "t.json")
        d = json.loads((tmp_path / "t.json").read_text())
        assert d["n_test"] == 10 and d["values"]["a"] == [0.9, 0.7]

    def test_lookup(self):
        t = self._table()
        assert t.at("b", 0.5) == 0.8
        np.testing.assert_array_equal(t.row("a"), [0.9, 0.7])

    def test_shape_check(self):
        with pytest.raises(AdrError):
            AdrTable((0.5,), ("a", "b"), np.zeros((2, 2)), "accuracy", 3)

    def test_aggregate(self):
        t1 = self._table()
        t2 = AdrTable(t1.rates, t1.methods, t1.values + 0.1, "accuracy", 10)
        mean, std = aggregate_tables([t1, t2])
        np.testing.assert_allclose(mean, t1.values + 0.05)
        np.testing.assert_allclose(std, np.full((2, 2), math.sqrt(0.005)))
