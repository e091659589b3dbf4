"""Leave-one-out top-K evaluation: HR@K, NDCG@10, MRR@10.

A model is anything exposing ``user_vectors(histories)`` and
``item_vectors()``; scores are dot products. Models with a non-factorised
score may instead expose ``score_users(users, histories) -> [U, M]``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .data import SplitDataset

DEFAULT_KS = (10, 50, 100)
DEFAULT_LENGTH_EDGES = (0, 10, 20, 30, 50, 70)


class EvaluationError(ValueError):
    pass


@dataclass
class RankedList:
    user: int
    order: np.ndarray  # candidate item ids by descending score
    test_item: int
    test_score: float
    rank: int  # 1-based


def rank_of(scores: np.ndarray, candidates: np.ndarray, target: int) -> int:
    """1-based rank of ``target``; ties go to the smaller item id."""
    pos = np.flatnonzero(candidates == target)
    if pos.size == 0:
        raise EvaluationError(f"test item {target} not among the candidates")
    s = scores[pos[0]]
    return int(1 + np.sum(scores > s) + np.sum((scores == s) & (candidates < target)))


def rank_items(user: int, candidates: Sequence[int], scores: Sequence[float], test_item: int) -> RankedList:
    """Order ``candidates`` by descending score (ascending id on ties)."""
    candidates = np.asarray(candidates)
    scores = np.asarray(scores, dtype=float)
    if candidates.size == 0:
        raise EvaluationError("empty candidate set")
    if candidates.shape != scores.shape:
        raise EvaluationError("one score per candidate required")
    order = candidates[np.lexsort((candidates, -scores))]
    r = rank_of(scores, candidates, test_item)
    return RankedList(user, order, test_item, float(scores[candidates == test_item][0]), r)


def _check(ranks) -> np.ndarray:
    ranks = np.asarray(ranks)
    if ranks.size == 0:
        raise EvaluationError("empty rank list")
    return ranks


def hit_rate_at_k(ranks, k: int) -> float:
    if k < 1:
        raise EvaluationError("K must be >= 1")
    ranks = _check(ranks)
    return float(np.mean(ranks <= k))


def ndcg_at_k(ranks, k: int = 10) -> float:
    """Single relevant item: 1/log2(rank+1) inside the cutoff, ideal DCG = 1."""
    if k < 1:
        raise EvaluationError("K must be >= 1")
    ranks = _check(ranks).astype(float)
    gains = np.where(ranks <= k, 1.0 / np.log2(ranks + 1.0), 0.0)
    return float(np.mean(gains))


def mrr_at_k(ranks, k: int = 10) -> float:
    if k < 1:
        raise EvaluationError("K must be >= 1")
    ranks = _check(ranks).astype(float)
    return float(np.mean(np.where(ranks <= k, 1.0 / ranks, 0.0)))


@dataclass
class MetricsReport:
    values: dict[str, float]
    num_users: int
    ranks: np.ndarray = field(repr=False, default_factory=lambda: np.empty(0))

    def __getitem__(self, key: str) -> float:
        return self.values[key]

    def check_invariants(self) -> None:
        hr = sorted((int(k.split("@")[1]), v) for k, v in self.values.items() if k.startswith("HR@"))
        for (_, a), (_, b) in zip(hr, hr[1:]):
            if a > b + 1e-12:
                raise EvaluationError(f"hit-rate monotonicity violated: {hr}")
        hr10 = self.values.get("HR@10")
        if hr10 is not None and not (self.values["MRR@10"] <= self.values["NDCG@10"] + 1e-12 <= hr10 + 2e-12):
            raise EvaluationError("expected MRR@10 <= NDCG@10 <= HR@10")

    def record(self) -> str:
        """Single-line machine-readable form."""
        parts = [f"{k}={v:.6f}" for k, v in self.values.items()]
        return " ".join(parts + [f"users={self.num_users}"])

    def table(self, title: str = "") -> str:
        lines = [title] if title else []
        lines += [f"{'metric':<10} {'value':>10}"]
        lines += [f"{k:<10} {v:>10.4f}" for k, v in self.values.items()]
        lines.append(f"{'users':<10} {self.num_users:>10d}")
        return "\n".join(lines)


def metrics_from_ranks(ranks, ks: Sequence[int] = DEFAULT_KS) -> MetricsReport:
    ranks = _check(ranks)
    values = {f"HR@{k}": hit_rate_at_k(ranks, k) for k in sorted(ks)}
    values["NDCG@10"] = ndcg_at_k(ranks, 10)
    values["MRR@10"] = mrr_at_k(ranks, 10)
    report = MetricsReport(values, int(ranks.size), ranks)
    report.check_invariants()
    return report


def score_matrix(model, users: Sequence[int], histories: Sequence[Sequence[int]]) -> np.ndarray:
    if hasattr(model, "score_users"):
        return np.asarray(model.score_users(users, histories), dtype=float)
    items = model.item_vectors()
    return model.user_vectors(histories) @ items.T


def held_out_ranks(model, split: SplitDataset, *, exclude_seen: bool = False,
                   users: Sequence[int] | None = None, batch_size: int = 512) -> np.ndarray:
    """Rank of each user's test item over the full catalogue.

    With ``exclude_seen`` the user's train/validation items are removed from
    the candidate set (the test item never is).
    """
    users = list(range(split.dataset.num_users)) if users is None else list(users)
    M = split.dataset.num_items
    items = None if hasattr(model, "score_users") else model.item_vectors()
    ranks = np.empty(len(users), dtype=np.int64)
    for start in range(0, len(users), batch_size):
        chunk = users[start:start + batch_size]
        hists = [split.history_for_test(u) for u in chunk]
        if items is None:
            scores = np.asarray(model.score_users(chunk, hists), dtype=float)
        else:
            scores = model.user_vectors(hists) @ items.T
        for row, u in enumerate(chunk):
            s = scores[row].copy()
            target = split.test[u]
            valid = np.ones(M, dtype=bool)
            if exclude_seen:
                valid[hists[row]] = False
                valid[target] = True
            cand = np.flatnonzero(valid)
            ranks[start + row] = rank_of(s[cand], cand, target)
    return ranks


def evaluate(model, split: SplitDataset, ks: Sequence[int] = DEFAULT_KS, *,
             exclude_seen: bool = False) -> MetricsReport:
    return metrics_from_ranks(held_out_ranks(model, split, exclude_seen=exclude_seen), ks)


@dataclass
class Comparison:
    a: MetricsReport
    b: MetricsReport
    deltas: dict[str, float]
    relative: dict[str, float]
    strata: list[tuple[str, int, dict[str, float], dict[str, float]]]

    def table(self, name_a: str = "A", name_b: str = "B") -> str:
        lines = [f"{'metric':<10} {name_a:>10} {name_b:>10} {'delta':>10} {'rel':>9}"]
        for k, d in self.deltas.items():
            rel = self.relative[k]
            rel_s = f"{rel * 100:>8.1f}%" if math.isfinite(rel) else f"{'n/a':>9}"
            lines.append(f"{k:<10} {self.a[k]:>10.4f} {self.b[k]:>10.4f} {d:>+10.4f} {rel_s}")
        lines.append("")
        lines.append(f"{'history':<10} {'users':>6} " + " ".join(
            f"{k + ' ' + n:>14}" for k in ("HR@10", "NDCG@10") for n in (name_a, name_b)))
        for label, count, ma, mb in self.strata:
            lines.append(f"{label:<10} {count:>6d} " + " ".join(
                f"{m[k]:>14.4f}" for k in ("HR@10", "NDCG@10") for m in (ma, mb)))
        return "\n".join(lines)


def _length_label(lo: float, hi: float) -> str:
    return f"{int(lo)}+" if math.isinf(hi) else f"{int(lo)}-{int(hi) - 1}"


def compare_reports(a: MetricsReport, b: MetricsReport, lengths: Sequence[int],
                    edges: Sequence[float] = DEFAULT_LENGTH_EDGES,
                    ks: Sequence[int] = DEFAULT_KS) -> Comparison:
    if a.ranks.shape != b.ranks.shape or len(lengths) != a.ranks.size:
        raise EvaluationError("reports cover different test sets")
    deltas = {k: a[k] - b[k] for k in a.values}
    relative = {k: (a[k] - b[k]) / b[k] if b[k] else (0.0 if a[k] == b[k] else math.inf) for k in a.values}
    lengths = np.asarray(lengths)
    bounds = list(edges) + [math.inf]
    strata = []
    for lo, hi in zip(bounds[:-1], bounds[1:]):
        sel = (lengths >= lo) & (lengths < hi)
        if sel.any():
            strata.append((_length_label(lo, hi), int(sel.sum()),
                           metrics_from_ranks(a.ranks[sel], ks).values,
                           metrics_from_ranks(b.ranks[sel], ks).values))
    return Comparison(a, b, deltas, relative, strata)


def compare(model_a, model_b, split: SplitDataset, ks: Sequence[int] = DEFAULT_KS, *,
            exclude_seen: bool = False, edges: Sequence[float] = DEFAULT_LENGTH_EDGES) -> Comparison:
    ra = evaluate(model_a, split, ks, exclude_seen=exclude_seen)
    rb = evaluate(model_b, split, ks, exclude_seen=exclude_seen)
    lengths = [len(split.history_for_test(u)) for u in range(split.dataset.num_users)]
    return compare_reports(ra, rb, lengths, edges, ks)
