"""Single-interest sequential ID model producing user/item embeddings.

Items own a row of an embedding table. A user is an attention-pooled mix of
the rows of their most recent items (one pooling head, i.e. one interest),
and a user/item pair is scored by the dot product of the two vectors.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import numerics as nx
from .numerics import Tensor

log = logging.getLogger(__name__)

MAX_HISTORY = 50


class IdModelError(ValueError):
    pass


class FrozenError(RuntimeError):
    pass


@dataclass
class IdModelConfig:
    embedding_dim: int = 64
    num_epochs: int = 5
    batch_size: int = 256
    negatives_per_positive: int = 1
    learning_rate: float = 5e-3
    weight_decay: float = 0.0
    interest_count: int = 1
    heldout_fraction: float = 0.05
    rng_seed: int = 0

    def __post_init__(self):
        if self.interest_count != 1:
            raise IdModelError("only single-interest pooling (interest_count=1) is supported")
        if self.embedding_dim < 2:
            raise IdModelError("embedding_dim must be >= 2")


@dataclass
class TrainLog:
    batch_losses: list[float] = field(default_factory=list)
    epoch_losses: list[float] = field(default_factory=list)
    heldout_before: float = float("nan")
    heldout_after: float = float("nan")


class IdEmbeddings:
    PARAM_NAMES = ("item_table", "pool.w", "pool.b", "pool.v")

    def __init__(self, item_table: np.ndarray, pool_w: np.ndarray, pool_b: np.ndarray,
                 pool_v: np.ndarray, frozen: bool = False):
        self.params = {
            "item_table": Tensor(item_table, name="item_table"),
            "pool.w": Tensor(pool_w, name="pool.w"),
            "pool.b": Tensor(pool_b, name="pool.b"),
            "pool.v": Tensor(pool_v, name="pool.v"),
        }
        self.frozen = frozen
        self.frozen_checksum: str | None = self.checksum() if frozen else None
        self.log = TrainLog()

    @classmethod
    def initialize(cls, num_items: int, dim: int, rng: np.random.Generator) -> IdEmbeddings:
        table = nx.init_trunc_normal((num_items, dim), -0.2, 0.2, 0.1, rng).data
        w = nx.init_trunc_normal((dim, dim), -0.2, 0.2, 0.1, rng).data
        v = nx.init_trunc_normal((dim,), -0.2, 0.2, 0.1, rng).data
        return cls(table, w, np.zeros(dim), v)

    @property
    def item_table(self) -> np.ndarray:
        return self.params["item_table"].data

    @property
    def num_items(self) -> int:
        return self.item_table.shape[0]

    @property
    def dim(self) -> int:
        return self.item_table.shape[1]

    def checksum(self) -> str:
        return nx.checksum(self.params)

    def freeze(self) -> IdEmbeddings:
        if not self.frozen:
            self.frozen = True
            self.frozen_checksum = self.checksum()
            for p in self.params.values():
                p.requires_grad = False
                p.data.flags.writeable = False
        return self

    def verify_frozen(self) -> None:
        if self.frozen and self.checksum() != self.frozen_checksum:
            raise FrozenError("ID embeddings changed after freeze")

    # lookups -------------------------------------------------------------------

    def item_embedding(self, item: int) -> np.ndarray:
        if not 0 <= item < self.num_items:
            raise IdModelError(f"unknown item {item}")
        return self.item_table[item]

    def user_embedding(self, history: Sequence[int]) -> np.ndarray:
        if len(history) == 0:
            raise IdModelError("empty history")
        return self.user_embeddings([history])[0]

    def user_embeddings(self, histories: Sequence[Sequence[int]]) -> np.ndarray:
        ids, mask = self._pad(histories)
        return self._pool(ids, mask).data

    def _pad(self, histories: Sequence[Sequence[int]]) -> tuple[np.ndarray, np.ndarray]:
        if any(len(h) == 0 for h in histories):
            raise IdModelError("empty history")
        clipped = [list(h)[-MAX_HISTORY:] for h in histories]
        width = max(len(h) for h in clipped)
        ids = np.zeros((len(clipped), width), dtype=np.int64)
        mask = np.zeros((len(clipped), width))
        for k, h in enumerate(clipped):
            if min(h) < 0 or max(h) >= self.num_items:
                raise IdModelError(f"unknown item id in history {h}")
            ids[k, : len(h)] = h
            mask[k, : len(h)] = 1.0
        return ids, mask

    def _pool(self, ids: np.ndarray, mask: np.ndarray) -> Tensor:
        p = self.params
        rows = nx.embedding(p["item_table"], ids)  # [B, T, d]
        hidden = nx.nonlinearity(rows @ p["pool.w"] + p["pool.b"], "tanh")
        logits = hidden @ p["pool.v"] + Tensor(np.where(mask > 0, 0.0, nx.MASK_VALUE))
        alpha = nx.softmax(logits, axis=-1)
        return nx.sum_(rows * nx.reshape(alpha, alpha.shape + (1,)), axis=1)

    def scores(self, histories: Sequence[Sequence[int]]) -> np.ndarray:
        return self.user_embeddings(histories) @ self.item_table.T

    # training ------------------------------------------------------------------

    def bpr_batch_loss(self, histories, positives, negatives) -> Tensor:
        ids, mask = self._pad(histories)
        u = self._pool(ids, mask)
        table = self.params["item_table"]
        pos = nx.embedding(table, np.asarray(positives))
        neg = nx.embedding(table, np.asarray(negatives))
        diff = nx.dot(u, pos) - nx.dot(u, neg)
        return -nx.mean(nx.log_sigmoid(diff))


def _training_pairs(sequences: Sequence[Sequence[int]]) -> list[tuple[int, int]]:
    return [(u, pos) for u, seq in enumerate(sequences) for pos in range(1, len(seq))]


def train_id_model(sequences: Sequence[Sequence[int]], num_items: int, config: IdModelConfig,
                   embeddings: IdEmbeddings | None = None) -> IdEmbeddings:
    """Fit the ID model with BPR on (history prefix -> next item) pairs.

    ``sequences`` are per-user item-index lists in time order (the training
    split). Negatives are drawn uniformly from items the user never touched.
    """
    if embeddings is not None and embeddings.frozen:
        raise FrozenError("cannot train frozen ID embeddings")
    if num_items < 2:
        raise IdModelError("need at least 2 items to sample negatives")
    pairs = _training_pairs(sequences)
    if not pairs:
        raise IdModelError("empty dataset: no (history, next item) pairs")
    rng = np.random.default_rng(config.rng_seed)
    model = embeddings or IdEmbeddings.initialize(num_items, config.embedding_dim, rng)
    seen = [set(s) for s in sequences]
    order = rng.permutation(len(pairs))
    n_held = int(len(pairs) * config.heldout_fraction)
    if n_held >= len(pairs):
        n_held = 0
    held = [pairs[k] for k in order[:n_held]]
    train = [pairs[k] for k in order[n_held:]]

    def negatives(batch):
        out = []
        for u, _ in batch:
            for _ in range(config.negatives_per_positive):
                while True:
                    j = int(rng.integers(num_items))
                    if j not in seen[u]:
                        out.append(j)
                        break
        return out

    def batch_loss(batch, negs):
        k = config.negatives_per_positive
        hist = [sequences[u][max(0, pos - MAX_HISTORY):pos] for u, pos in batch for _ in range(k)]
        posi = [sequences[u][pos] for u, pos in batch for _ in range(k)]
        return model.bpr_batch_loss(hist, posi, negs)

    held_negs = negatives(held) if held else []
    if held:
        model.log.heldout_before = batch_loss(held, held_negs).item()
    params = model.params
    for p in params.values():
        p.requires_grad = True
    steps_per_epoch = max(1, -(-len(train) // config.batch_size))
    state = nx.OptimizerState(lr=config.learning_rate, total_steps=config.num_epochs * steps_per_epoch,
                              weight_decay=config.weight_decay)
    for epoch in range(config.num_epochs):
        perm = rng.permutation(len(train))
        total = 0.0
        for start in range(0, len(train), config.batch_size):
            batch = [train[k] for k in perm[start:start + config.batch_size]]
            loss = batch_loss(batch, negatives(batch))
            if not np.isfinite(loss.item()):
                raise IdModelError(f"non-finite ID-model loss at epoch {epoch}")
            grads = nx.backward(loss, params)
            nx.optimizer_step(params, grads, state)
            model.log.batch_losses.append(loss.item())
            total += loss.item() * len(batch)
        model.log.epoch_losses.append(total / len(train))
        log.info("id model epoch %d loss %.4f", epoch, model.log.epoch_losses[-1])
    for p in params.values():
        p.requires_grad = False
        p.grad = None
    if held:
        model.log.heldout_after = batch_loss(held, held_negs).item()
    return model


def freeze(embeddings: IdEmbeddings) -> IdEmbeddings:
    return embeddings.freeze()


def user_embedding(embeddings: IdEmbeddings, history: Sequence[int]) -> np.ndarray:
    return embeddings.user_embedding(history)


def item_embedding(embeddings: IdEmbeddings, item: int) -> np.ndarray:
    return embeddings.item_embedding(item)
