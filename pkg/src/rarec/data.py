"""Interaction logs: ingestion, cleaning, leave-one-out splits, tuning-set
construction and a synthetic corpus with planted cluster structure."""
from __future__ import annotations

import json
import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .encoder import words

log = logging.getLogger(__name__)

MAX_TITLE_CHARS = 200
MIN_USER_INTERACTIONS = 3
MAX_MALFORMED_FRACTION = 0.10


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class Interaction:
    user_id: str
    item_id: str
    timestamp: int
    title: str

    def to_record(self, role: str | None = None) -> dict:
        rec = {"user_id": self.user_id, "item_id": self.item_id,
               "timestamp": self.timestamp, "title": self.title}
        if role is not None:
            rec["role"] = role
        return rec


@dataclass
class LoadReport:
    total_lines: int = 0
    loaded: int = 0
    malformed: int = 0


def _parse_record(line: str) -> Interaction | None:
    try:
        rec = json.loads(line)
    except json.JSONDecodeError:
        return None
    if not isinstance(rec, dict):
        return None
    user, item, ts, title = (rec.get(k) for k in ("user_id", "item_id", "timestamp", "title"))
    if not isinstance(user, str) or not isinstance(item, str) or not isinstance(title, str):
        return None
    if isinstance(ts, bool) or not isinstance(ts, int):
        return None
    return Interaction(user, item, ts, title)


def load_interactions(path: str | Path, report: LoadReport | None = None) -> list[Interaction]:
    """Read JSON-lines interactions, skipping (and counting) malformed lines."""
    report = report if report is not None else LoadReport()
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    out = []
    for line in text.splitlines():
        if not line.strip():
            continue
        report.total_lines += 1
        rec = _parse_record(line)
        if rec is None:
            report.malformed += 1
        else:
            out.append(rec)
    report.loaded = len(out)
    if not report.total_lines:
        log.warning("%s contains no interactions", path)
    elif report.malformed:
        log.warning("%s: skipped %d malformed of %d lines", path, report.malformed, report.total_lines)
        if report.malformed / report.total_lines > MAX_MALFORMED_FRACTION:
            raise DataError(f"{report.malformed}/{report.total_lines} malformed lines in {path}")
    return out


def write_jsonl(path: str | Path, records: Iterable[dict]) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        for rec in records:
            f.write(json.dumps(rec, ensure_ascii=False, sort_keys=True) + "\n")


@dataclass
class Dataset:
    """Cleaned interactions. Users and items are indexed in sorted-id order."""

    user_ids: list[str]
    item_ids: list[str]
    titles: list[str]
    sequences: list[list[int]]  # item indices per user, time ordered
    timestamps: list[list[int]]
    popularity: list[int]

    @property
    def num_users(self) -> int:
        return len(self.user_ids)

    @property
    def num_items(self) -> int:
        return len(self.item_ids)

    def to_interactions(self) -> list[Interaction]:
        out = []
        for u, (seq, ts) in enumerate(zip(self.sequences, self.timestamps)):
            for i, t in zip(seq, ts):
                out.append(Interaction(self.user_ids[u], self.item_ids[i], t, self.titles[i]))
        return out

    def item_index(self) -> dict[str, int]:
        return {item: k for k, item in enumerate(self.item_ids)}


def preprocess(raw: Sequence[Interaction]) -> Dataset:
    """Drop empty / over-long titles, then users with fewer than 3 interactions."""
    valid = [r for r in raw if r.title.strip() and len(r.title.strip()) <= MAX_TITLE_CHARS]
    per_user: dict[str, list[tuple[int, int, Interaction]]] = defaultdict(list)
    for order, r in enumerate(valid):
        per_user[r.user_id].append((r.timestamp, order, r))
    kept = {u: sorted(rows, key=lambda x: (x[0], x[1])) for u, rows in per_user.items()
            if len(rows) >= MIN_USER_INTERACTIONS}
    if not kept:
        raise DataError("no users left after preprocessing")
    titles: dict[str, str] = {}
    for _, _, r in sorted((row for rows in kept.values() for row in rows), key=lambda x: x[1]):
        titles.setdefault(r.item_id, r.title.strip())
    user_ids = sorted(kept)
    item_ids = sorted(titles)
    index = {item: k for k, item in enumerate(item_ids)}
    sequences, stamps = [], []
    popularity = [0] * len(item_ids)
    for u in user_ids:
        seq = [index[r.item_id] for _, _, r in kept[u]]
        sequences.append(seq)
        stamps.append([r.timestamp for _, _, r in kept[u]])
        for i in seq:
            popularity[i] += 1
    return Dataset(user_ids, item_ids, [titles[i] for i in item_ids], sequences, stamps, popularity)


@dataclass
class SplitDataset:
    dataset: Dataset
    train: list[list[int]]
    val: list[int]
    test: list[int]

    def history_for_test(self, user: int) -> list[int]:
        return self.train[user] + [self.val[user]]

    def to_records(self) -> list[dict]:
        ds = self.dataset
        out = []
        for u, seq in enumerate(ds.sequences):
            roles = ["train"] * (len(seq) - 2) + ["val", "test"]
            for i, t, role in zip(seq, ds.timestamps[u], roles):
                out.append(Interaction(ds.user_ids[u], ds.item_ids[i], t, ds.titles[i]).to_record(role))
        return out


def leave_one_out_split(dataset: Dataset) -> SplitDataset:
    """Last interaction -> test, second to last -> validation, rest -> train."""
    train, val, test = [], [], []
    for seq in dataset.sequences:
        if len(seq) < MIN_USER_INTERACTIONS:
            raise DataError("leave-one-out needs at least 3 interactions per user")
        train.append(list(seq[:-2]))
        val.append(seq[-2])
        test.append(seq[-1])
    return SplitDataset(dataset, train, val, test)


# ---------------------------------------------------------------------------
# efficient tuning set


@dataclass(frozen=True)
class TrainingSample:
    user: int
    history: tuple[int, ...]
    positive: int
    negative: int = -1


def word_overlap(target_title: str, history_titles: Iterable[str]) -> int:
    target = set(words(target_title))
    seen: set[str] = set()
    for t in history_titles:
        seen.update(words(t))
    return len(target & seen)


def denoise(samples: Sequence[TrainingSample], titles: Sequence[str]) -> list[TrainingSample]:
    """Keep samples whose target shares at least one word with the history."""
    word_sets = [frozenset(words(t)) for t in titles]
    out = []
    for s in samples:
        target = word_sets[s.positive]
        if any(target & word_sets[h] for h in s.history):
            out.append(s)
    if samples and not out:
        log.warning("denoising removed every sample")
    return out


def quantile_buckets(values: np.ndarray, num_buckets: int) -> np.ndarray:
    if num_buckets < 1:
        raise DataError("bucket count must be >= 1")
    values = np.asarray(values, dtype=float)
    if num_buckets == 1 or values.size == 0:
        return np.zeros(values.size, dtype=np.int64)
    edges = np.quantile(values, np.linspace(0, 1, num_buckets + 1)[1:-1])
    return np.searchsorted(edges, values, side="right").astype(np.int64)


def allocate(capacities: Sequence[int], n: int) -> list[int]:
    """Spread ``n`` evenly over cells with spare capacity, largest remainder first.

    Cells smaller than their share are filled completely and the excess is
    re-spread over the others. Ties in the remainder go to lower cell indices.
    """
    caps = list(capacities)
    if n > sum(caps):
        raise DataError(f"cannot allocate {n} from {sum(caps)} samples")
    quota = [0] * len(caps)
    active = [c for c, cap in enumerate(caps) if cap > 0]
    remaining = n
    while remaining > 0 and active:
        share = remaining / len(active)
        saturated = [c for c in active if caps[c] - quota[c] <= share]
        if saturated:
            for c in saturated:
                remaining -= caps[c] - quota[c]
                quota[c] = caps[c]
            active = [c for c in active if c not in saturated]
            continue
        base = remaining // len(active)
        extra = remaining - base * len(active)
        for rank, c in enumerate(active):
            quota[c] += base + (1 if rank < extra else 0)
        remaining = 0
    return quota


@dataclass
class DiversityReport:
    cells: dict[tuple[int, int], int] = field(default_factory=dict)  # available
    allocation: dict[tuple[int, int], int] = field(default_factory=dict)


def diversity_sample(samples: Sequence[TrainingSample], popularity: Sequence[int],
                     user_buckets: int, item_buckets: int, n: int, seed: int,
                     report: DiversityReport | None = None) -> list[TrainingSample]:
    """Stratify by (history-length quantile, target-popularity quantile) and
    draw ``n`` samples spread uniformly over the non-empty cells."""
    if user_buckets < 1 or item_buckets < 1:
        raise DataError("bucket counts must be >= 1")
    if n > len(samples):
        raise DataError(f"requested {n} samples but only {len(samples)} available")
    lengths = np.array([len(s.history) for s in samples])
    pops = np.array([popularity[s.positive] for s in samples])
    bu = quantile_buckets(lengths, user_buckets)
    bi = quantile_buckets(pops, item_buckets)
    cell_ids = bu * item_buckets + bi
    num_cells = user_buckets * item_buckets
    members = [np.flatnonzero(cell_ids == c) for c in range(num_cells)]
    quota = allocate([len(m) for m in members], n)
    rng = np.random.default_rng(seed)
    chosen = []
    for m, q in zip(members, quota):
        if q:
            chosen.append(rng.choice(m, size=q, replace=False))
    picked = np.sort(np.concatenate(chosen)) if chosen else np.array([], dtype=np.int64)
    if report is not None:
        for c in range(num_cells):
            key = (c // item_buckets, c % item_buckets)
            report.cells[key] = len(members[c])
            report.allocation[key] = quota[c]
    return [samples[k] for k in picked]


def sample_negative(rng: np.random.Generator, num_items: int, exclude: set[int]) -> int:
    if len(exclude) >= num_items:
        raise DataError("user has interacted with every item; no negative available")
    while True:
        j = int(rng.integers(num_items))
        if j not in exclude:
            return j


def expand_training_pairs(split: SplitDataset, seed: int = 0) -> list[TrainingSample]:
    """(history prefix, next item) for every position >= 1 of each train sequence."""
    rng = np.random.default_rng(seed)
    M = split.dataset.num_items
    out = []
    for u, seq in enumerate(split.train):
        seen = set(seq)
        for pos in range(1, len(seq)):
            out.append(TrainingSample(u, tuple(seq[:pos]), seq[pos], sample_negative(rng, M, seen)))
    return out


@dataclass
class EfficientSet:
    samples: list[TrainingSample]
    pool_size: int
    denoised_size: int
    mode: str
    report: DiversityReport = field(default_factory=DiversityReport)


def build_efficient_set(split: SplitDataset, n: int | None, seed: int, *, mode: str = "efficient",
                        user_buckets: int = 4, item_buckets: int = 4) -> EfficientSet:
    """Construct the alignment tuning set.

    ``efficient`` denoises then diversity-samples to ``n``; ``random`` draws
    ``n`` uniformly from the raw pool; ``all`` returns the whole pool.
    """
    ss = np.random.SeedSequence(seed)
    neg_seed, pick_seed = (int(s.generate_state(1)[0]) for s in ss.spawn(2))
    pool = expand_training_pairs(split, neg_seed)
    if mode == "all":
        return EfficientSet(pool, len(pool), len(pool), mode)
    if n is None:
        raise DataError("sample count n required")
    if mode == "random":
        if n > len(pool):
            raise DataError(f"requested n={n} exceeds pool size {len(pool)}")
        rng = np.random.default_rng(pick_seed)
        idx = np.sort(rng.choice(len(pool), size=n, replace=False))
        return EfficientSet([pool[k] for k in idx], len(pool), len(pool), mode)
    if mode != "efficient":
        raise DataError(f"unknown construction mode {mode!r}")
    clean = denoise(pool, split.dataset.titles)
    if n > len(clean):
        raise DataError(f"requested n={n} exceeds denoised pool size {len(clean)} (raw pool {len(pool)})")
    report = DiversityReport()
    chosen = diversity_sample(clean, split.dataset.popularity, user_buckets, item_buckets, n,
                              pick_seed, report)
    return EfficientSet(chosen, len(pool), len(clean), mode, report)


def align_set_records(split: SplitDataset, samples: Sequence[TrainingSample]) -> list[dict]:
    """Interaction records (role ``align``) naming each sample's target event."""
    ds = split.dataset
    out = []
    for s in samples:
        pos = len(s.history)
        out.append(Interaction(ds.user_ids[s.user], ds.item_ids[s.positive], ds.timestamps[s.user][pos],
                               ds.titles[s.positive]).to_record("align"))
    return out


def samples_from_records(split: SplitDataset, records: Sequence[dict], seed: int = 0) -> list[TrainingSample]:
    """Inverse of :func:`align_set_records`; negatives are redrawn.

    A record is located in the user's train sequence by (timestamp, item id).
    """
    ds = split.dataset
    users = {u: k for k, u in enumerate(ds.user_ids)}
    rng = np.random.default_rng(seed)
    out = []
    for n, rec in enumerate(records, start=1):
        u = users.get(rec.get("user_id"))
        if u is None:
            raise DataError(f"align record {n} names an unknown user")
        seq = split.train[u]
        stamps = ds.timestamps[u]
        pos = next((p for p in range(1, len(seq))
                    if stamps[p] == rec.get("timestamp") and ds.item_ids[seq[p]] == rec.get("item_id")), None)
        if pos is None:
            raise DataError(f"align record {n} does not match the training split")
        out.append(TrainingSample(u, tuple(seq[:pos]), seq[pos],
                                  sample_negative(rng, ds.num_items, set(seq))))
    return out


# ---------------------------------------------------------------------------
# synthetic corpus

_SYLLABLES = ["ka", "lo", "mi", "ne", "ru", "sa", "ti", "vo", "ze", "pa", "do", "fi", "gu", "ha",
              "je", "qu", "wy", "xo", "be", "cy"]
_GENERIC = ["classic", "new", "premium", "basic", "deluxe", "mini", "pro", "original"]


@dataclass
class SyntheticCorpus:
    interactions: list[Interaction]
    user_cluster: dict[str, int]
    item_cluster: dict[str, int]
    user_favourites: dict[str, tuple[str, ...]] = field(default_factory=dict)


def _pseudo_words(count: int, rng: np.random.Generator) -> list[str]:
    made: set[str] = set()
    out = []
    while len(out) < count:
        w = "".join(rng.choice(_SYLLABLES, size=int(rng.integers(2, 4))))
        if w not in made:
            made.add(w)
            out.append(w)
    return out


def generate_synthetic(num_users: int = 2000, num_items: int = 500, num_clusters: int = 4,
                       interactions_per_user: int = 20, vocab_per_cluster: int = 30,
                       seed: int = 0, in_cluster_rate: float = 0.9,
                       favourite_rate: float = 0.5) -> SyntheticCorpus:
    """Users and items in latent clusters; item titles use cluster word pools.

    Each user picks a home cluster and two favourite words from its pool.
    A within-cluster pick (rate ``in_cluster_rate``) is, with probability
    ``favourite_rate``, restricted to items whose title holds a favourite
    word; otherwise items are drawn by a Zipf-like popularity. The remaining
    picks go to other clusters. History lengths vary uniformly around
    ``interactions_per_user``.
    """
    if num_clusters < 2:
        raise DataError("need at least 2 clusters")
    if num_users < 1 or num_items < 2 * num_clusters or interactions_per_user < MIN_USER_INTERACTIONS:
        raise DataError("degenerate synthetic sizes")
    if vocab_per_cluster < 3:
        raise DataError("vocab_per_cluster must be >= 3")
    rng = np.random.default_rng(seed)
    vocab = _pseudo_words(num_clusters * vocab_per_cluster, rng)
    pools = [vocab[c * vocab_per_cluster:(c + 1) * vocab_per_cluster] for c in range(num_clusters)]
    item_cluster = rng.permutation(np.arange(num_items) % num_clusters)
    width = len(str(max(num_items, num_users)))
    item_ids = [f"i{k:0{width}d}" for k in range(num_items)]
    user_ids = [f"u{k:0{width}d}" for k in range(num_users)]
    titles, title_words = [], []
    for k in range(num_items):
        ws = list(rng.choice(pools[item_cluster[k]], size=int(rng.integers(2, 5)), replace=False))
        title_words.append(set(ws))
        if rng.random() < 0.5:
            ws.insert(0, str(rng.choice(_GENERIC)))
        titles.append(" ".join(w.capitalize() for w in ws))
    members = [np.flatnonzero(item_cluster == c) for c in range(num_clusters)]
    weights = np.empty(num_items)
    for m in members:
        ranks = rng.permutation(len(m))
        weights[m] = 1.0 / (ranks + 1.0) ** 0.8
    lo = max(MIN_USER_INTERACTIONS, interactions_per_user // 2)
    hi = max(lo, interactions_per_user + interactions_per_user // 2)

    def draw(candidates: np.ndarray, taken: np.ndarray) -> int | None:
        cand = candidates[~taken[candidates]]
        if cand.size == 0:
            return None
        p = weights[cand] / weights[cand].sum()
        return int(rng.choice(cand, p=p))

    interactions = []
    user_cluster = {}
    user_favourites = {}
    for u in range(num_users):
        home = int(rng.integers(num_clusters))
        user_cluster[user_ids[u]] = home
        favs = set(rng.choice(pools[home], size=2, replace=False))
        user_favourites[user_ids[u]] = tuple(sorted(favs))
        fav_items = np.array([i for i in members[home] if title_words[i] & favs])
        others = np.concatenate([members[c] for c in range(num_clusters) if c != home])
        count = int(rng.integers(lo, hi + 1))
        taken = np.zeros(num_items, dtype=bool)
        t = int(rng.integers(1_500_000_000, 1_600_000_000))
        for _ in range(count):
            if rng.random() < in_cluster_rate:
                pick = None
                if fav_items.size and rng.random() < favourite_rate:
                    pick = draw(fav_items, taken)
                if pick is None:
                    pick = draw(members[home], taken)
            else:
                pick = draw(others, taken)
            if pick is None:
                break
            taken[pick] = True
            t += int(rng.integers(60, 86_400))
            interactions.append(Interaction(user_ids[u], item_ids[pick], t, titles[pick]))
    return SyntheticCorpus(interactions, user_cluster,
                           {item_ids[k]: int(item_cluster[k]) for k in range(num_items)},
                           user_favourites)
