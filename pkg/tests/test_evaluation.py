import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from rarec import data as dp
from rarec import evaluation as ev


def brute_force(ranks, k):
    """Independent recount: one user at a time with plain Python arithmetic."""
    hits = ndcg = mrr = 0.0
    for r in ranks:
        r = int(r)
        if r <= k:
            hits += 1
        if r <= 10:
            ndcg += 1 / math.log2(r + 1)
            mrr += 1 / r
    n = len(ranks)
    return hits / n, ndcg / n, mrr / n


def test_metrics_equal_brute_force_on_random_rank_vectors():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        n = int(rng.integers(1, 60))
        ranks = rng.integers(1, 200, size=n)
        rep = ev.metrics_from_ranks(ranks)
        for k in (10, 50, 100):
            hr, ndcg, mrr = brute_force(ranks, k)
            assert rep[f"HR@{k}"] == hr
        assert rep["NDCG@10"] == pytest.approx(ndcg, rel=1e-12)
        assert rep["MRR@10"] == pytest.approx(mrr, rel=1e-12)
        assert rep["HR@10"] <= rep["HR@50"] <= rep["HR@100"]


def test_metric_examples():
    assert ev.hit_rate_at_k([1, 1, 1], 10) == 1.0
    assert ev.hit_rate_at_k([1, 11], 10) == 0.5
    assert ev.ndcg_at_k([1]) == 1.0
    assert ev.ndcg_at_k([3]) == 0.5
    assert ev.ndcg_at_k([11]) == 0.0
    assert ev.mrr_at_k([1]) == 1.0
    assert ev.mrr_at_k([2]) == 0.5
    assert ev.mrr_at_k([1, 2, 20]) == pytest.approx(0.5)
    for fn in (ev.ndcg_at_k, ev.mrr_at_k):
        with pytest.raises(ev.EvaluationError):
            fn([])
    with pytest.raises(ev.EvaluationError):
        ev.hit_rate_at_k([1], 0)


@given(st.lists(st.integers(1, 300), min_size=1, max_size=50))
def test_report_invariants(ranks):
    rep = ev.metrics_from_ranks(ranks)
    assert rep["MRR@10"] <= rep["NDCG@10"] <= rep["HR@10"] <= rep["HR@50"] <= rep["HR@100"]
    assert rep.record().endswith(f"users={len(ranks)}")
    assert all(f"{k}=" in rep.record() for k in rep.values)


def test_rank_items_examples():
    assert ev.rank_items(0, [7], [0.3], 7).rank == 1
    ranked = ev.rank_items(0, [5, 2, 9, 4], [1.0, 1.0, 1.0, 1.0], 5)
    assert ranked.rank == 3 and list(ranked.order) == [2, 4, 5, 9]
    ranked = ev.rank_items(0, [3, 1, 2], [0.1, 0.9, 0.5], 3)
    assert list(ranked.order) == [1, 2, 3] and ranked.rank == 3 and ranked.test_score == 0.1
    with pytest.raises(ev.EvaluationError):
        ev.rank_items(0, [1, 2], [0.0, 1.0], 3)


def test_ranking_is_a_permutation_with_id_tie_break():
    rng = np.random.default_rng(4)
    for _ in range(50):
        cand = rng.permutation(30)
        scores = rng.integers(0, 4, size=30).astype(float)
        target = int(rng.choice(cand))
        ranked = ev.rank_items(0, cand, scores, target)
        assert sorted(ranked.order) == sorted(cand)
        expected = sorted(cand, key=lambda i: (-scores[list(cand).index(i)], i))
        assert list(ranked.order) == expected
        assert ranked.rank == expected.index(target) + 1


@pytest.fixture(scope="module")
def split():
    corpus = dp.generate_synthetic(num_users=200, num_items=150, seed=1)
    return dp.leave_one_out_split(dp.preprocess(corpus.interactions))


class Oracle:
    def __init__(self, split, sign=1.0):
        self.split, self.sign = split, sign

    def score_users(self, users, histories):
        s = np.zeros((len(users), self.split.dataset.num_items))
        for row, u in enumerate(users):
            s[row, self.split.test[u]] = self.sign
        return s


class RandomScores:
    def __init__(self, num_items, seed):
        self.num_items, self.rng = num_items, np.random.default_rng(seed)

    def score_users(self, users, histories):
        return self.rng.random((len(users), self.num_items))


class Vectors:
    def __init__(self, users, items):
        self.u, self.i = users, items

    def user_vectors(self, histories):
        return np.stack([self.u[tuple(h)] for h in histories])

    def item_vectors(self):
        return self.i


def test_oracle_and_antioracle(split):
    best = ev.evaluate(Oracle(split), split)
    assert all(v == 1.0 for v in best.values.values())
    worst = ev.evaluate(Oracle(split, -1.0), split)
    assert all(v == 0.0 for v in worst.values.values())
    cmp = ev.compare(Oracle(split), Oracle(split, -1.0), split)
    assert all(d == 1.0 for d in cmp.deltas.values())


def test_random_model_hit_rate_expectation(split):
    M = split.dataset.num_items
    n = split.dataset.num_users
    for k in (10, 50, 100):
        runs = [ev.evaluate(RandomScores(M, seed), split)[f"HR@{k}"] for seed in range(20)]
        p = k / M
        se = math.sqrt(p * (1 - p) / (n * len(runs)))
        assert abs(np.mean(runs) - p) <= 3 * se


def test_batched_scores_match_one_at_a_time(split):
    rng = np.random.default_rng(0)
    M, D = split.dataset.num_items, 5
    users = {tuple(split.history_for_test(u)): rng.normal(size=D) for u in range(split.dataset.num_users)}
    model = Vectors(users, rng.normal(size=(M, D)))
    ranks = ev.held_out_ranks(model, split, batch_size=7)
    for u in range(0, split.dataset.num_users, 17):
        hist = split.history_for_test(u)
        scores = [float(np.dot(users[tuple(hist)], model.i[j])) for j in range(M)]
        assert ranks[u] == ev.rank_items(u, list(range(M)), scores, split.test[u]).rank


def test_exclude_seen_removes_history_items(split):
    M = split.dataset.num_items

    class HistoryFirst:
        def score_users(self, users, histories):
            s = np.zeros((len(users), M))
            for row, h in enumerate(histories):
                s[row, h] = 2.0
            return s

    full = ev.held_out_ranks(HistoryFirst(), split)
    filtered = ev.held_out_ranks(HistoryFirst(), split, exclude_seen=True)
    assert np.all(filtered <= full)
    assert np.any(filtered < full)


def test_compare_examples(split):
    rnd = RandomScores(split.dataset.num_items, 3)
    a = ev.evaluate(rnd, split)
    cmp = ev.compare_reports(a, a, [len(split.history_for_test(u)) for u in range(split.dataset.num_users)])
    assert all(d == 0.0 for d in cmp.deltas.values())
    assert sum(count for _, count, _, _ in cmp.strata) == split.dataset.num_users
    text = cmp.table("x", "y")
    assert "delta" in text and "history" in text
    with pytest.raises(ev.EvaluationError):
        ev.compare_reports(a, ev.metrics_from_ranks([1, 2]), [1] * a.num_users)


def test_evaluation_is_read_only(split):
    from rarec.id_model import IdEmbeddings
    from rarec.alignment import IdOnlyModel
    emb = IdEmbeddings.initialize(split.dataset.num_items, 4, np.random.default_rng(0)).freeze()
    before = emb.checksum()
    first = ev.evaluate(IdOnlyModel(emb), split)
    assert emb.checksum() == before
    assert ev.evaluate(IdOnlyModel(emb), split).values == first.values
