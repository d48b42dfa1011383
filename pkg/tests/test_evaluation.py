import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from entsal.evaluation import (EvaluationError, err_at_k, evaluate_search_run,
                               ndcg_at_k, permutation_test,
                               precision_recall_at_k, tsv_report, win_tie_loss)


class TestPrecisionRecall:
    def test_mixed_ranking(self):
        p1, r1 = precision_recall_at_k(list("ABCDE"), {"A", "C", "F"}, 1)
        p5, r5 = precision_recall_at_k(list("ABCDE"), {"A", "C", "F"}, 5)
        assert (p1, r1) == (1.0, pytest.approx(1 / 3))
        assert (p5, r5) == (pytest.approx(0.4), pytest.approx(2 / 3))

    def test_short_list_keeps_denominator_k(self):
        p5, r5 = precision_recall_at_k(["A"], {"A"}, 5)
        assert (p5, r5) == (pytest.approx(0.2), 1.0)

    def test_total_miss(self):
        assert precision_recall_at_k(["B"], {"A"}, 1) == (0.0, 0.0)

    def test_empty_relevant_skipped(self):
        assert precision_recall_at_k(["A"], set(), 5) is None

    @given(st.lists(st.integers(0, 20), max_size=15, unique=True),
           st.sets(st.integers(0, 20), max_size=8), st.integers(1, 10))
    def test_ranges(self, ranking, relevant, k):
        out = precision_recall_at_k(ranking, relevant, k)
        if relevant:
            p, r = out
            assert 0.0 <= p <= 1.0 and 0.0 <= r <= 1.0


class TestNdcg:
    def test_hand_computed_case(self):
        grades = {"a": 2, "b": 0, "c": 1}
        got = ndcg_at_k(["a", "b", "c"], grades, 3)
        dcg = 3.0 / math.log2(2) + 0.0 + 1.0 / math.log2(4)
        idcg = 3.0 / math.log2(2) + 1.0 / math.log2(3) + 0.0
        assert got == pytest.approx(dcg / idcg, rel=1e-12)
        assert got == pytest.approx(0.96394, abs=1e-5)

    def test_ideal_ordering_is_one(self):
        grades = {"a": 3, "b": 2, "c": 1, "d": 0}
        assert ndcg_at_k(["a", "b", "c", "d"], grades, 20) == pytest.approx(1.0)

    def test_all_zero_retrieved_with_positives_elsewhere(self):
        grades = {"a": 0, "b": 0, "hidden": 2}
        assert ndcg_at_k(["a", "b"], grades, 20) == 0.0

    def test_no_positive_grade_skipped(self):
        assert ndcg_at_k(["a"], {"a": 0}, 20) is None

    def test_unjudged_docs_count_zero(self):
        grades = {"a": 1}
        with_unjudged = ndcg_at_k(["x", "a"], grades, 20)
        assert with_unjudged == pytest.approx((1.0 / math.log2(3)) / 1.0)

    def test_prepending_best_doc_never_hurts(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            docs = [f"d{i}" for i in range(8)]
            grades = {d: int(g) for d, g in zip(docs, rng.integers(0, 4, 8))}
            if not any(grades.values()):
                grades[docs[0]] = 1
            ranking = list(rng.permutation(docs))
            best = "best"
            grades[best] = max(grades.values()) + 1
            base = ndcg_at_k(ranking, grades, 5)
            boosted = ndcg_at_k([best] + ranking, grades, 5)
            assert boosted >= base - 1e-12


class TestErr:
    def test_single_doc_grade_one(self):
        assert err_at_k(["a"], {"a": 1}, 20, g_max=1) == pytest.approx(0.5, abs=1e-12)

    def test_two_docs_both_relevant(self):
        got = err_at_k(["a", "b"], {"a": 1, "b": 1}, 20, g_max=1)
        assert got == pytest.approx(0.625, abs=1e-12)

    def test_all_zero(self):
        assert err_at_k(["a", "b"], {"a": 0}, 20, g_max=1) == 0.0

    def test_in_unit_interval(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            docs = [f"d{i}" for i in range(10)]
            grades = {d: int(g) for d, g in zip(docs, rng.integers(0, 5, 10))}
            v = err_at_k(list(rng.permutation(docs)), grades, 20, g_max=4)
            assert 0.0 <= v <= 1.0

    def test_prepending_best_doc_never_hurts(self):
        grades = {"a": 1, "b": 2, "best": 4}
        base = err_at_k(["a", "b"], grades, 20, g_max=4)
        assert err_at_k(["best", "a", "b"], grades, 20, g_max=4) >= base


class TestWinTieLoss:
    def test_identical(self):
        a = {u: 0.5 for u in "xyz"}
        assert win_tie_loss(a, dict(a)) == (0, 3, 0)

    def test_uniform_improvement(self):
        a = {u: 1.5 for u in "xyz"}
        b = {u: 0.5 for u in "xyz"}
        assert win_tie_loss(a, b) == (3, 0, 0)

    def test_mixed(self):
        a = {"x": 1.0, "y": 0.5, "z": 0.0}
        b = {"x": 0.0, "y": 0.5, "z": 1.0}
        assert win_tie_loss(a, b) == (1, 1, 1)

    def test_mismatched_units_rejected(self):
        with pytest.raises(EvaluationError):
            win_tie_loss({"x": 1.0}, {"y": 1.0})

    def test_tolerance(self):
        a = {"x": 1.0 + 1e-12}
        b = {"x": 1.0}
        assert win_tie_loss(a, b) == (0, 1, 0)


class TestPermutationTest:
    def test_all_zero_diffs(self):
        assert permutation_test([0.0] * 8) == 1.0

    def test_exact_enumeration_ten_positives(self):
        p = permutation_test([1.0] * 10)
        assert p == 2 / 1024

    def test_symmetric_in_sign(self):
        rng = np.random.default_rng(2)
        diffs = rng.normal(size=30)
        p_pos = permutation_test(diffs, seed=5)
        p_neg = permutation_test(-diffs, seed=5)
        assert p_pos == p_neg

    def test_monte_carlo_deterministic_given_seed(self):
        rng = np.random.default_rng(3)
        diffs = rng.normal(size=40)
        assert permutation_test(diffs, seed=9) == permutation_test(diffs, seed=9)

    def test_monte_carlo_add_one_correction_bounds(self):
        # even an extreme shift cannot produce p below 1/(B+1)
        p = permutation_test([5.0] * 40, permutations=1000, seed=0)
        assert p >= 1 / 1001

    def test_calibration_quick(self):
        # symmetric null: the rejection rate at 0.05 should be near 0.05;
        # the full-scale calibration runs in the acceptance suite
        rng = np.random.default_rng(4)
        rejections = 0
        trials = 200
        for t in range(trials):
            diffs = rng.normal(size=50)
            if permutation_test(diffs, permutations=2000, seed=t) < 0.05:
                rejections += 1
        assert 0.02 <= rejections / trials <= 0.09

    def test_empty_rejected(self):
        with pytest.raises(EvaluationError):
            permutation_test([])


class TestAggregation:
    def test_search_run_aggregate_and_skips(self):
        run = {"q1": ["a", "b"], "q2": ["c"], "q3": ["d"]}
        qrels = {"q1": {"a": 1, "b": 0}, "q2": {"c": 0}}   # q2 positive-free, q3 unjudged
        per_unit, means, skipped = evaluate_search_run(run, qrels, k=20)
        assert set(per_unit) == {"q1"}
        assert skipped == 2
        assert means["NDCG@20"] == pytest.approx(per_unit["q1"]["NDCG@20"])

    def test_tsv_report_shape(self):
        text = tsv_report({"u1": {"P@1": 1.0}}, [("P@1", 0.5), ("units", 1)])
        lines = text.strip().split("\n")
        assert lines[0] == "u1\tP@1\t1.000000"
        assert lines[1] == "ALL\tP@1\t0.500000"
        assert lines[2] == "ALL\tunits\t1"
