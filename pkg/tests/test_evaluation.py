import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from adarec.evaluation import (RankResult, evaluate, format_table, hit_rate_at_1, inference_time, metrics_at_n,
                               rank_of_target, report)
from adarec.data import EvalCases

from oracles import brute_force_rank

ranks_st = st.lists(st.integers(1, 50), min_size=1, max_size=30)


class TestRank:
    def test_strict_maximum(self):
        assert rank_of_target([0.0, 0.1, 3.0, 0.2], 2).rank == 1

    def test_all_equal_breaks_by_id(self):
        assert rank_of_target(np.zeros(6), 3).rank == 3

    def test_hand_sorted(self):
        assert rank_of_target([np.nan, 0.1, 0.9, 0.5], 3).rank == 2

    def test_padding_column_ignored(self):
        assert rank_of_target([1e9, 0.1, 0.2], 2).rank == 1

    @pytest.mark.parametrize("target", [0, 4, -1])
    def test_out_of_vocabulary(self, target):
        with pytest.raises(ValueError):
            rank_of_target([0.0, 1.0, 2.0, 3.0], target)

    def test_rank_result_bounds(self):
        with pytest.raises(ValueError):
            RankResult(0)

    @settings(max_examples=200, deadline=None)
    @given(st.integers(0, 2**31), st.integers(2, 30))
    def test_matches_sorting(self, seed, v):
        rng = np.random.default_rng(seed)
        scores = rng.integers(0, 4, size=v + 1).astype(float)  # many ties
        target = int(rng.integers(1, v + 1))
        assert rank_of_target(scores, target).rank == brute_force_rank(scores, target)


class TestMetrics:
    def test_rank_one(self):
        assert metrics_at_n([RankResult(1)], 5) == (1.0, 1.0, 1.0)

    def test_rank_three(self):
        mrr, hr, ndcg = metrics_at_n([3], 5)
        assert mrr == pytest.approx(1 / 3) and hr == 1.0 and ndcg == pytest.approx(0.5)

    def test_one_hit_one_miss(self):
        assert metrics_at_n([1, 6], 5) == (0.5, 0.5, 0.5)

    def test_errors(self):
        with pytest.raises(ValueError):
            metrics_at_n([], 5)
        with pytest.raises(ValueError):
            metrics_at_n([1], 0)

    @settings(max_examples=100, deadline=None)
    @given(ranks_st, st.integers(1, 40))
    def test_monotone_in_cutoff(self, ranks, n):
        lo, hi = metrics_at_n(ranks, n), metrics_at_n(ranks, n + 1)
        assert all(a <= b for a, b in zip(lo, hi))

    @settings(max_examples=100, deadline=None)
    @given(ranks_st, st.integers(1, 40))
    def test_bounds(self, ranks, n):
        mrr, hr, ndcg = metrics_at_n(ranks, n)
        assert 0 <= mrr <= hr <= 1 and 0 <= ndcg <= hr

    @settings(max_examples=100, deadline=None)
    @given(ranks_st, st.integers(1, 40))
    def test_worse_case_never_helps(self, ranks, n):
        base = metrics_at_n(ranks, n)
        worse = metrics_at_n(ranks + [max(ranks) + 1], n)
        assert all(b <= a + 1e-15 for a, b in zip(base, worse))


class Fixed:
    """Scores each case by a fixed per-item preference."""

    def __init__(self, prefs):
        self.prefs = np.asarray(prefs, dtype=float)

    def logits(self, inputs):
        return np.broadcast_to(self.prefs, (len(inputs), inputs.shape[1], len(self.prefs))).copy()


class TestReport:
    cases = EvalCases(np.array([[0, 1], [0, 2], [1, 3]]), np.array([3, 1, 2]))

    def test_evaluate(self):
        out = evaluate(Fixed([0.0, 0.2, 0.1, 0.9]), self.cases)
        assert out["ranks"] == [1, 2, 3]
        assert out["metrics"]["HR@5"] == 1.0
        assert out["metrics"]["MRR@5"] == pytest.approx((1 + 1 / 2 + 1 / 3) / 3)
        assert hit_rate_at_1(Fixed([0.0, 0.2, 0.1, 0.9]), self.cases) == pytest.approx(1 / 3)

    def test_table_has_all_columns(self):
        model = Fixed([0.0, 0.2, 0.1, 0.9])
        rep = report(evaluate(model, self.cases), 123, 456, evaluate(model, self.cases))
        table = format_table(rep, 2.5)
        header = table.splitlines()[0].split()
        assert header[1:] == ["MRR@5", "HR@5", "NDCG@5", "MRR@20", "HR@20", "NDCG@20", "Params", "Speedup"]
        assert "2.50x" in table and "123" in table and "456" in table
        assert "speedup" not in rep

    def test_inference_time(self):
        assert inference_time(Fixed([0.0, 1.0]), np.array([[0, 1]]), batches=3, batch_size=4) >= 0
        with pytest.raises(ValueError):
            inference_time(Fixed([0.0, 1.0]), np.zeros((0, 2), dtype=int))
