import math

import numpy as np
import pytest
from numpy.testing import assert_allclose

from hyperrag.alignment import EmbeddingTable, KnowledgeItem, Query
from hyperrag.errors import ConfigurationError, ContractViolation
from hyperrag.gate import (
    CrmConfig,
    EmbeddingSimilarityScorer,
    FeatureDotScorer,
    RelevanceHead,
    TableLookupScorer,
    confidence,
    crm_loss,
    crm_loss_and_grads,
    decide,
    filter_relevant,
    fit_theta,
    relevance,
    train_crm,
)

# Softmax of scores (2, 0, 0): e^2 / (e^2 + 2), evaluated by hand.
SOFTMAX_2_0_0 = 0.7869860421615985
SIGMOID_4 = 0.9820137900379085
LN2 = 0.6931471805599453


def small_head(hidden=8, q_dim=6, i_dim=3, seed=0):
    return RelevanceHead(q_dim, i_dim, hidden=hidden, seed=seed)


def zero_head(**kw):
    head = small_head(**kw)
    head.w1[:] = 0.0
    head.w2[:] = 0.0
    head.b1[:] = 0.0
    head.b2 = 0.0
    return head


def make_query(qid="q", dim=3, value=0.0):
    return Query(qid, np.full(dim, value), np.full(dim, value))


class TestConfidence:
    def setup_method(self):
        self.query = make_query()
        self.scorer = TableLookupScorer(
            {("q", "a"): 2.0, ("q", "b"): 0.0, ("q", "c"): 0.0, ("q", "solo"): -5.0}
        )

    def test_single_candidate_is_one(self):
        assert confidence(self.scorer, self.query, ["solo"]) == 1.0

    def test_two_equal_scores(self):
        assert_allclose(confidence(self.scorer, self.query, ["b", "c"]), 0.5, rtol=1e-15)

    def test_softmax_2_0_0(self):
        sigma = confidence(self.scorer, self.query, ["a", "b", "c"])
        assert_allclose(sigma, SOFTMAX_2_0_0, rtol=1e-12)

    def test_empty_candidates_rejected(self):
        with pytest.raises(ContractViolation):
            confidence(self.scorer, self.query, [])

    def test_missing_table_entry(self):
        with pytest.raises(ContractViolation):
            confidence(self.scorer, self.query, ["unknown"])


class TestDecide:
    def test_confident_skips_retrieval(self):
        assert decide(0.9, 0.5) == 0

    def test_boundary_retrieves(self):
        assert decide(0.5, 0.5) == 1
        assert decide(0.0, 0.0) == 1

    def test_monotone(self, rng):
        for _ in range(200):
            theta = rng.uniform(0.0, 1.0)
            s1, s2 = sorted(rng.uniform(0.0, 1.0, size=2))
            if decide(s1, theta) == 0:
                assert decide(s2, theta) == 0

    def test_out_of_range_rejected(self):
        with pytest.raises(ContractViolation):
            decide(1.2, 0.5)
        with pytest.raises(ContractViolation):
            decide(0.5, -0.1)


class TestScorers:
    def test_embedding_scorer_prefers_nearby(self, rng):
        dims = {"visual": 3, "textual": 3, "graph_triplet": 3, "query": 6}
        table = EmbeddingTable(4, dims, seed=0)
        q = Query("q", rng.standard_normal(3), rng.standard_normal(3))
        scorer = EmbeddingSimilarityScorer(table)
        target_spatial = table.spatial(q.combined_features, "query")
        f_near = np.linalg.pinv(table.weight["visual"]) @ target_spatial
        near = KnowledgeItem("near", "visual", f_near)
        far = KnowledgeItem("far", "visual", f_near + 50.0)
        assert scorer.score(q, near) > scorer.score(q, far)
        assert scorer.score(q, near) <= 0.0

    def test_dot_scorer_truncates(self):
        q = Query("q", np.array([1.0, 2.0]), np.array([3.0, 4.0]))
        item = KnowledgeItem("i", "visual", np.array([1.0, 0.0, 9.0]))
        # Only the first two feature entries participate: 0.5 * (1 + 3).
        assert_allclose(FeatureDotScorer().score(q, item), 2.0, rtol=1e-15)


class TestRelevance:
    def test_zero_head_gives_half(self):
        head = zero_head()
        assert relevance(head, make_query(), KnowledgeItem("i", "visual", np.zeros(3))) == 0.5

    def test_raw_score_four(self):
        head = zero_head()
        head.b2 = 4.0
        r = relevance(head, make_query(), KnowledgeItem("i", "visual", np.zeros(3)))
        assert_allclose(r, SIGMOID_4, rtol=1e-12)

    def test_monotone_in_raw_score(self, rng):
        head = zero_head()
        doc = KnowledgeItem("i", "visual", np.zeros(3))
        values = []
        for b2 in np.linspace(-5.0, 5.0, 21):
            head.b2 = float(b2)
            values.append(relevance(head, make_query(), doc))
        assert all(a <= b for a, b in zip(values, values[1:]))
        assert all(0.0 < v < 1.0 for v in values)

    def test_dimension_mismatch(self):
        head = small_head(q_dim=6, i_dim=3)
        with pytest.raises(ConfigurationError):
            relevance(head, make_query(dim=4), KnowledgeItem("i", "visual", np.zeros(3)))


class TestFilterRelevant:
    def test_zero_head_filters_everything(self):
        head = zero_head()
        docs = [KnowledgeItem(f"i{k}", "visual", np.zeros(3)) for k in range(4)]
        assert filter_relevant(head, make_query(), docs) == []

    def test_subset_order_and_idempotence(self, rng):
        head = small_head(seed=3)
        q = Query("q", rng.standard_normal(3), rng.standard_normal(3))
        docs = [KnowledgeItem(f"i{k}", "visual", rng.standard_normal(3)) for k in range(12)]
        kept = filter_relevant(head, q, docs)
        ids = [d.id for d in docs]
        assert [d.id for d in kept] == [i for i in ids if i in {d.id for d in kept}]
        assert all(relevance(head, q, d) > 0.5 for d in kept)
        assert filter_relevant(head, q, kept) == kept


class TestCrmLoss:
    def test_saturated_head_loss_vanishes(self):
        head = zero_head()
        head.b2 = 40.0
        q = make_query()
        pos = [KnowledgeItem("p", "visual", np.zeros(3))]
        assert crm_loss(head, [(q, pos, [])]) <= 1e-9
        head.b2 = -40.0
        neg = [KnowledgeItem("n", "visual", np.zeros(3))]
        assert crm_loss(head, [(q, [], neg)]) <= 1e-9

    def test_single_positive_at_half(self):
        head = zero_head()
        q = make_query()
        pos = [KnowledgeItem("p", "visual", np.zeros(3))]
        assert_allclose(crm_loss(head, [(q, pos, [])]), LN2, rtol=1e-12)

    def test_additive_over_queries(self, rng):
        head = small_head(seed=1)
        batch = []
        for i in range(5):
            q = Query(f"q{i}", rng.standard_normal(3), rng.standard_normal(3))
            pos = [KnowledgeItem(f"p{i}", "visual", rng.standard_normal(3))]
            neg = [KnowledgeItem(f"n{i}", "visual", rng.standard_normal(3))]
            batch.append((q, pos, neg))
        total = crm_loss(head, batch)
        parts = sum(crm_loss(head, [entry]) for entry in batch)
        assert abs(total - parts) <= 1e-12

    def test_clamp_keeps_loss_finite(self):
        head = zero_head()
        head.b2 = -80.0
        q = make_query()
        pos = [KnowledgeItem("p", "visual", np.zeros(3))]
        loss = crm_loss(head, [(q, pos, [])])
        assert np.isfinite(loss)
        assert_allclose(loss, -math.log(1e-12), rtol=1e-9)

    def test_unlabeled_query_rejected(self):
        with pytest.raises(ContractViolation):
            crm_loss(small_head(), [(make_query(), [], [])])

    def test_gradient_matches_finite_differences(self, rng):
        head = small_head(hidden=6, seed=2)
        batch = []
        for i in range(3):
            q = Query(f"q{i}", 0.5 * rng.standard_normal(3), 0.5 * rng.standard_normal(3))
            pos = [KnowledgeItem(f"p{i}", "visual", 0.5 * rng.standard_normal(3))]
            neg = [KnowledgeItem(f"n{i}", "visual", 0.5 * rng.standard_normal(3))]
            batch.append((q, pos, neg))
        _, grads = crm_loss_and_grads(head, batch)
        analytic = head.flat_grads(grads)
        flat0 = head.get_flat()
        h = 1e-5
        fd = np.zeros_like(flat0)
        for j in range(flat0.size):
            for sign in (+1, -1):
                probe = flat0.copy()
                probe[j] += sign * h
                head.set_flat(probe)
                fd[j] += sign * crm_loss(head, batch)
            fd[j] /= 2.0 * h
        head.set_flat(flat0)
        denom = np.maximum(np.abs(fd), 1e-8)
        assert np.max(np.abs(analytic - fd) / denom) < 1e-4


class TestFitTheta:
    def test_calibrated_threshold(self):
        pairs = [(s, False) for s in [0.705, 0.72, 0.8, 0.95, 0.88]]
        pairs += [(s, True) for s in [0.3, 0.5, 0.67, 0.695, 0.25]]
        theta, acc = fit_theta(pairs)
        assert 0.69 <= theta <= 0.71
        assert acc == 1.0

    def test_tie_resolves_to_lowest(self):
        pairs = [(0.0, True)] * 3
        theta, acc = fit_theta(pairs)
        assert theta == 0.0
        assert acc == 1.0

    def test_empty_rejected(self):
        with pytest.raises(ContractViolation):
            fit_theta([])


def planted_crm_corpus(rng, n_queries=10, feat=4, margin=3.0):
    direction = np.zeros(feat)
    direction[0] = 1.0
    labeled = []
    for i in range(n_queries):
        q = Query(f"q{i}", rng.standard_normal(feat), rng.standard_normal(feat))
        pos = [
            KnowledgeItem(f"p{i}{j}", "visual", margin * direction + 0.1 * rng.standard_normal(feat))
            for j in range(3)
        ]
        neg = [
            KnowledgeItem(f"n{i}{j}", "visual", -margin * direction + 0.1 * rng.standard_normal(feat))
            for j in range(3)
        ]
        labeled.append((q, pos, neg))
    return labeled


class TestTrainCrm:
    def calibrated_pairs(self):
        pairs = [(s, False) for s in [0.705, 0.72, 0.8, 0.95]]
        pairs += [(s, True) for s in [0.3, 0.5, 0.67, 0.695]]
        return pairs

    def test_separable_corpus_trains_to_perfection(self, rng):
        labeled = planted_crm_corpus(rng)
        config = CrmConfig(hidden=16, lr=0.05, epochs=150, seed=0)
        head, theta, trace = train_crm(labeled, self.calibrated_pairs(), config, 8, 4)
        initial = crm_loss(RelevanceHead(8, 4, hidden=16, seed=0), labeled)
        assert trace.epoch_losses[-1] < 0.05 * initial
        for q, pos, neg in labeled:
            kept = filter_relevant(head, q, pos + neg)
            assert [d.id for d in kept] == [d.id for d in pos]
        assert 0.69 <= theta <= 0.71

    def test_deterministic(self, rng):
        labeled = planted_crm_corpus(rng, n_queries=4)
        config = CrmConfig(hidden=8, lr=0.05, epochs=20, seed=5)
        h1, t1, tr1 = train_crm(labeled, self.calibrated_pairs(), config, 8, 4)
        h2, t2, tr2 = train_crm(labeled, self.calibrated_pairs(), config, 8, 4)
        assert t1 == t2
        assert tr1.epoch_losses == tr2.epoch_losses
        assert np.array_equal(h1.get_flat(), h2.get_flat())

    def test_requires_both_label_kinds(self, rng):
        q = make_query()
        pos_only = [(q, [KnowledgeItem("p", "visual", np.zeros(3))], [])]
        with pytest.raises(ContractViolation):
            train_crm(pos_only, [(0.5, True)], CrmConfig(hidden=4), 6, 3)
