import numpy as np
import pytest

from conftest import identity_projection_params, make_doc, random_params, store_from

from entsal.baselines import (BaselineError, LinearTrainConfig,
                              LETOR_FEATURE_NAMES, frequency_scores,
                              letor_features, linear_score, pagerank_scores,
                              rank_by_score, train_linear_pairwise)


class TestFrequency:
    def test_direct_counts(self):
        doc = make_doc(words=(0, 1), mentions=((5, 0), (5, 1), (5, 0), (6, 1)))
        scores = frequency_scores(doc)
        assert scores == {5: 3.0, 6: 1.0}
        assert rank_by_score(scores)[0][0] == 5

    def test_empty_doc(self):
        assert frequency_scores(make_doc()) == {}

    def test_equal_counts_tie_by_index(self):
        doc = make_doc(words=(0,), mentions=((7, 0), (5, 0)))
        assert [e for e, _ in rank_by_score(frequency_scores(doc))] == [5, 7]


class TestPagerank:
    def test_single_entity_scores_one(self):
        params = random_params(10, d=4, seed=0)
        doc = make_doc(words=(0,), mentions=((5, 0), (5, 0)))
        for alpha in (0.0, 0.3, 1.0):
            scores = pagerank_scores(doc, params, None, alpha)
            assert scores[5] == pytest.approx(1.0)

    def test_identical_embeddings_equal_frequency_symmetric(self):
        params = identity_projection_params(10, d=4)
        params.V[5] = params.V[6] = np.array([1.0, 2.0, 0.0, 0.0])
        doc = make_doc(words=(0,), mentions=((5, 0), (6, 0)))
        scores = pagerank_scores(doc, params, None, 0.7)
        assert scores[5] == pytest.approx(scores[6])

    def test_alpha_zero_is_normalized_frequency(self):
        params = random_params(12, d=4, seed=1)
        doc = make_doc(words=(0,), mentions=((5, 0), (5, 0), (6, 0), (7, 0)))
        scores = pagerank_scores(doc, params, None, 0.0)
        assert scores[5] == pytest.approx(0.5)
        assert scores[6] == pytest.approx(0.25)
        assert scores[7] == pytest.approx(0.25)

    def test_scores_sum_to_one(self):
        rng = np.random.default_rng(2)
        params = random_params(20, d=6, seed=2)
        store = store_from({11: (1, 2), 13: (3,)})
        for _ in range(10):
            ents = rng.choice(np.arange(10, 20), size=4, replace=False)
            mentions = tuple((int(e), 0) for e in ents
                             for _ in range(int(rng.integers(1, 4))))
            doc = make_doc(words=(1, 2), mentions=mentions)
            alpha = float(rng.uniform())
            scores = pagerank_scores(doc, params, store, alpha)
            assert sum(scores.values()) == pytest.approx(1.0)

    def test_empty_entity_set_rejected(self):
        params = random_params(10, d=4, seed=3)
        with pytest.raises(BaselineError):
            pagerank_scores(make_doc(words=(1,)), params, None, 0.5)

    def test_alpha_out_of_range_rejected(self):
        params = random_params(10, d=4, seed=4)
        doc = make_doc(words=(0,), mentions=((5, 0),))
        with pytest.raises(BaselineError):
            pagerank_scores(doc, params, None, 1.5)


class TestLetorFeatures:
    def test_first_location_boundary(self):
        params = random_params(10, d=4, seed=5)
        doc = make_doc(words=tuple(range(10)) , mentions=((5, 0), (5, 7)))
        feats = letor_features(doc, params)
        assert feats[5].first_location == 0.0
        assert feats[5].frequency == 2.0

    def test_single_entity_vote_zero(self):
        params = random_params(10, d=4, seed=6)
        doc = make_doc(words=(0, 1), mentions=((5, 1),))
        assert letor_features(doc, params)[5].embedding_vote == 0.0

    def test_orthogonal_embeddings_vote_zero(self):
        params = random_params(10, d=4, seed=7)
        params.V = np.zeros((10, 4))
        params.V[5, 0] = 1.0
        params.V[6, 1] = 1.0
        doc = make_doc(words=(0, 1), mentions=((5, 0), (6, 1)))
        feats = letor_features(doc, params)
        assert feats[5].embedding_vote == 0.0
        assert feats[6].embedding_vote == 0.0

    def test_mention_order_invariant_except_first_location(self):
        params = random_params(12, d=4, seed=8)
        mentions = ((5, 3), (6, 1), (5, 0), (7, 2))
        doc_a = make_doc(words=(0, 1, 2, 3), mentions=mentions)
        doc_b = make_doc(words=(0, 1, 2, 3), mentions=tuple(reversed(mentions)))
        fa, fb = letor_features(doc_a, params), letor_features(doc_b, params)
        assert fa == fb   # first_location depends only on the min position


def separable_pairs():
    # positive examples dominate on feature 0 with a comfortable margin
    rng = np.random.default_rng(9)
    pairs = []
    for _ in range(12):
        pos = np.array([3.0 + rng.uniform(), rng.normal(), rng.normal()])
        neg = np.array([rng.uniform(), rng.normal(), rng.normal()])
        pairs.append((pos, neg))
    return pairs


class TestLinearPairwise:
    def test_separable_reaches_zero_hinge(self):
        pairs = separable_pairs()
        params = train_linear_pairwise(pairs, LETOR_FEATURE_NAMES)
        for pos, neg in pairs:
            assert linear_score(params, pos) > linear_score(params, neg)
        hinge = sum(max(0.0, 1.0 - linear_score(params, p) + linear_score(params, n))
                    for p, n in pairs)
        assert hinge == pytest.approx(0.0, abs=1e-9)

    def test_identical_pair_stays_tied(self):
        x = np.array([1.0, 2.0, 3.0])
        params = train_linear_pairwise([(x, x)], LETOR_FEATURE_NAMES)
        assert linear_score(params, x) == linear_score(params, x)

    def test_huge_l2_drives_weights_to_zero(self):
        pairs = separable_pairs()
        params = train_linear_pairwise(pairs, LETOR_FEATURE_NAMES,
                                       LinearTrainConfig(l2=1e9))
        np.testing.assert_allclose(params.weights, 0.0, atol=1e-12)

    def test_deterministic(self):
        pairs = separable_pairs()
        a = train_linear_pairwise(pairs, LETOR_FEATURE_NAMES)
        b = train_linear_pairwise(pairs, LETOR_FEATURE_NAMES)
        np.testing.assert_array_equal(a.weights, b.weights)

    def test_best_objective_monotone_per_epoch(self):
        pairs = separable_pairs()
        trace: list = []
        train_linear_pairwise(pairs, LETOR_FEATURE_NAMES, trace=trace)
        assert all(b <= a + 1e-15 for a, b in zip(trace, trace[1:]))

    def test_dimension_mismatch_rejected(self):
        with pytest.raises(BaselineError):
            train_linear_pairwise([(np.zeros(2), np.zeros(2))], LETOR_FEATURE_NAMES)


class TestLinearScore:
    def fit(self):
        return train_linear_pairwise(separable_pairs(), LETOR_FEATURE_NAMES)

    def test_zero_weights_zero_score(self):
        params = self.fit()
        params.weights = np.zeros_like(params.weights)
        assert linear_score(params, np.array([4.0, 5.0, 6.0])) == 0.0

    def test_one_hot_frequency_orders_by_frequency(self):
        params = self.fit()
        params.weights = np.array([1.0, 0.0, 0.0])
        scores = [linear_score(params, np.array([f, 0.0, 0.0])) for f in (1, 5, 3)]
        assert sorted(range(3), key=lambda i: -scores[i]) == [1, 2, 0]

    def test_constant_feature_contributes_nothing(self):
        x = np.array([2.0, 7.0, 1.0])
        pairs = [(np.array([3.0, 7.0, 0.5]), np.array([1.0, 7.0, -0.5]))] * 3
        params = train_linear_pairwise(pairs, LETOR_FEATURE_NAMES)
        assert params.std[1] == 1.0   # guard kicked in
        base = linear_score(params, x)
        x2 = x.copy()
        x2[1] = 7.0
        assert linear_score(params, x2) == base

    def test_unknown_feature_name_rejected(self):
        params = self.fit()
        with pytest.raises(BaselineError, match="unknown"):
            linear_score(params, {"frequency": 1.0, "first_location": 0.0,
                                  "embedding_vote": 0.0, "bogus": 3.0})

    def test_missing_feature_name_rejected(self):
        params = self.fit()
        with pytest.raises(BaselineError, match="missing"):
            linear_score(params, {"frequency": 1.0})

    def test_mapping_matches_array_order(self):
        params = self.fit()
        x = np.array([2.0, 0.25, -1.0])
        as_map = {"frequency": 2.0, "first_location": 0.25, "embedding_vote": -1.0}
        assert linear_score(params, x) == linear_score(params, as_map)
