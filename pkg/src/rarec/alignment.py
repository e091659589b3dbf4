"""ID-representation alignment: the only trainable part of the system.

Frozen ID embeddings are mapped by per-layer affine projectors into the
encoder's hidden space, prefixed with learnable per-layer context rows and
injected as extra key/value rows into every encoder block. Training combines
a BPR ranking loss on dot-product scores with layerwise in-batch InfoNCE
terms that pull the injected vectors toward the encoder's own text states.

Layer convention: prefixes exist for l = 0..L. Prefix l widens the block
that reads h^(l); the alignment loss compares prefix l with the text state
h~^(l) for l = 1..L.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import numerics as nx
from .encoder import Encoder, LayerStates, pool
from .id_model import FrozenError, IdEmbeddings
from .numerics import Tensor
from .prompts import (DEFAULT_MAX_HISTORY, PromptTemplate, default_item_template,
                      default_user_template, render_hard_prompt, render_item_prompt)

log = logging.getLogger(__name__)

VARIANTS = ("full", "no_reparam", "no_con_instruction", "inputs_only", "project_inputs")
SIDES = ("user", "item")


class AlignmentError(ValueError):
    pass


class NonFiniteLoss(ArithmeticError):
    pass


@dataclass
class AlignmentHyperparams:
    tau: float = 0.5
    lam: float = 0.1
    lam_theta: float = 1e-6
    batch_size: int = 64
    variant: str = "full"
    prefix_len: int = 2
    steps: int = 500
    lr: float = 5e-4
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    max_history: int = DEFAULT_MAX_HISTORY
    rng_seed: int = 0

    def __post_init__(self):
        if self.tau <= 0:
            raise AlignmentError("temperature must be positive")
        if self.lam < 0 or self.lam_theta < 0:
            raise AlignmentError("loss weights must be non-negative")
        if self.variant not in VARIANTS:
            raise AlignmentError(f"unknown variant {self.variant!r}; choose from {VARIANTS}")
        if self.prefix_len < 0:
            raise AlignmentError("prefix_len must be >= 0")

    @property
    def effective_prefix_len(self) -> int:
        return 0 if self.variant == "no_con_instruction" else self.prefix_len


class AlignmentParams:
    """Projectors W/b and context prefixes c, per side and (for most variants) per layer."""

    def __init__(self, tensors: dict[str, Tensor], variant: str, num_layers: int, id_dim: int,
                 hidden_dim: int, prefix_len: int):
        self.tensors = tensors
        self.variant = variant
        self.num_layers = num_layers
        self.id_dim = id_dim
        self.hidden_dim = hidden_dim
        self.prefix_len = prefix_len

    @classmethod
    def initialize(cls, variant: str, num_layers: int, id_dim: int, hidden_dim: int,
                   prefix_len: int, rng: np.random.Generator | int = 0) -> AlignmentParams:
        if variant not in VARIANTS:
            raise AlignmentError(f"unknown variant {variant!r}")
        rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
        if variant == "no_con_instruction":
            prefix_len = 0
        d, D, L, P = id_dim, hidden_dim, num_layers, prefix_len

        def tn(shape):
            return nx.init_trunc_normal(shape, -0.02, 0.02, 0.01, rng)

        t: dict[str, Tensor] = {}
        for side in SIDES:
            if variant in ("full", "no_con_instruction"):
                for l in range(L + 1):
                    t[f"{side}.W.{l}"] = tn((D, d))
                    t[f"{side}.b.{l}"] = tn((D,))
            elif variant == "no_reparam":
                t[f"{side}.W.shared"] = tn((D, d))
                t[f"{side}.b.shared"] = tn((D,))
            elif variant == "inputs_only":
                t[f"{side}.W.input"] = tn((D, d))
                t[f"{side}.b.input"] = tn((D,))
            else:  # project_inputs
                t[f"{side}.Wq.input"] = tn(((P + 1) * D, d))
                t[f"{side}.bq.input"] = tn(((P + 1) * D,))
        if P > 0 and variant in ("full", "no_reparam"):
            for side in SIDES:
                for l in range(L + 1):
                    t[f"{side}.c.{l}"] = tn((P, D))
        for name, tensor in t.items():
            tensor.name = name
            tensor.requires_grad = True
        return cls(t, variant, L, d, D, P)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def num_parameters(self) -> int:
        return sum(t.data.size for t in self.tensors.values())

    def checksum(self) -> str:
        return nx.checksum(self.tensors)

    def snapshot(self) -> AlignmentParams:
        copy = {k: Tensor(v.data.copy(), name=k) for k, v in self.tensors.items()}
        return AlignmentParams(copy, self.variant, self.num_layers, self.id_dim, self.hidden_dim,
                               self.prefix_len)

    def zero_(self) -> None:
        for t in self.tensors.values():
            t.data[...] = 0.0

    # per-side building blocks ------------------------------------------------------

    def reparameterize(self, e, layer: int, side: str) -> Tensor:
        """p^(l) = W^(l) e + b^(l); ``e`` is [d] or [batch, d]."""
        if not 0 <= layer <= self.num_layers:
            raise AlignmentError(f"layer {layer} outside 0..{self.num_layers}")
        e = nx.as_tensor(e)
        if e.shape[-1] != self.id_dim:
            raise AlignmentError(f"ID embedding size {e.shape[-1]} != {self.id_dim}")
        key = {"no_reparam": "shared", "inputs_only": "input"}.get(self.variant, str(layer))
        if self.variant == "project_inputs":
            raise AlignmentError("project_inputs has no per-layer projector")
        W, b = self.tensors[f"{side}.W.{key}"], self.tensors[f"{side}.b.{key}"]
        return e @ nx.transpose(W) + b

    def contextualize(self, p: Tensor, layer: int, side: str) -> Tensor:
        """d^(l) = [c^(l) || p^(l)]; rows of c first, p last.

        ``p`` is [d'] (returns [P+1, d']) or [batch, d'] (returns [batch, P+1, d']).
        """
        if p.shape[-1] != self.hidden_dim:
            raise AlignmentError(f"hidden size {p.shape[-1]} != {self.hidden_dim}")
        key = f"{side}.c.{layer}"
        if p.ndim == 1:
            rows = nx.reshape(p, (1, self.hidden_dim))
            return nx.concat([self.tensors[key], rows], axis=0) if key in self.tensors else rows
        B = p.shape[0]
        rows = nx.reshape(p, (B, 1, self.hidden_dim))
        if key not in self.tensors:
            return rows
        c = self.tensors[key] + Tensor(np.zeros((B,) + self.tensors[key].shape))
        return nx.concat([c, rows], axis=1)

    def pseudo_tokens(self, e: Tensor, side: str, token_embeddings: Tensor) -> Tensor:
        """Attend from projected ID queries over the frozen token-embedding matrix."""
        B = e.shape[0]
        D, n = self.hidden_dim, self.prefix_len + 1
        q = e @ nx.transpose(self.tensors[f"{side}.Wq.input"]) + self.tensors[f"{side}.bq.input"]
        q = nx.reshape(q, (B, n, D))
        attn = nx.softmax(nx.scale(q @ nx.transpose(token_embeddings), 1.0 / math.sqrt(D)), axis=-1)
        return attn @ token_embeddings


def reparameterize(params: AlignmentParams, e, layer: int, side: str) -> Tensor:
    return params.reparameterize(e, layer, side)


def contextualize(params: AlignmentParams, p: Tensor, layer: int, side: str) -> Tensor:
    return params.contextualize(p, layer, side)


@dataclass
class SideEncoding:
    """Result of encoding a batch on one side."""

    final: Tensor                 # pooled h^(L), [batch, d']
    aligned: list[Tensor]         # pooled injected vectors for l = 1..L, each [batch, d']
    pooled: list[Tensor]          # pooled h^(l) for l = 0..L
    states: LayerStates


def encode_side(encoder: Encoder, params: AlignmentParams, side: str, token_lists: Sequence[Sequence[int]],
                id_vectors: np.ndarray) -> SideEncoding:
    """Encode prompts with their ID vectors injected according to ``params.variant``."""
    ids, mask = encoder.pad([list(t) for t in token_lists])
    e = Tensor(np.asarray(id_vectors, dtype=nx.DTYPE))
    L = encoder.num_layers
    if params.num_layers != L or params.hidden_dim != encoder.hidden_dim:
        raise AlignmentError("alignment parameters do not match the encoder shape")
    v = params.variant
    if v in ("full", "no_reparam", "no_con_instruction"):
        prefixes = [params.contextualize(params.reparameterize(e, l, side), l, side) for l in range(L + 1)]
        states = encoder.forward(ids, mask, prefixes=prefixes)
        aligned = [nx.mean(prefixes[l], axis=1) for l in range(1, L + 1)]
    else:
        if v == "inputs_only":
            rows = nx.reshape(params.reparameterize(e, 0, side), (len(token_lists), 1, params.hidden_dim))
        else:
            rows = params.pseudo_tokens(e, side, encoder.weights["tok_emb"])
        states = encoder.forward(ids, mask, input_rows=rows)
        aligned = [nx.mean(states.extra[l], axis=1) for l in range(1, L + 1)]
    pooled = [pool(states, l) for l in range(L + 1)]
    return SideEncoding(pooled[L], aligned, pooled, states)


def plain_pooled(encoder: Encoder, token_lists: Sequence[Sequence[int]], batch_size: int = 256) -> np.ndarray:
    """Pooled hard-prompt-only states, [n, L+1, d'] (no graph is recorded)."""
    out = []
    for start in range(0, len(token_lists), batch_size):
        ids, mask = encoder.pad([list(t) for t in token_lists[start:start + batch_size]])
        states = encoder.forward(ids, mask)
        out.append(np.stack([pool(states, l).data for l in range(encoder.num_layers + 1)], axis=1))
    return np.concatenate(out, axis=0)


# losses ----------------------------------------------------------------------------


def score(h_u, h_i) -> Tensor:
    h_u, h_i = nx.as_tensor(h_u), nx.as_tensor(h_i)
    if h_u.shape[-1] != h_i.shape[-1]:
        raise AlignmentError(f"score: length mismatch {h_u.shape} vs {h_i.shape}")
    return nx.dot(h_u, h_i)


def bpr_loss(x_pos, x_neg, params: Sequence[Tensor] = (), lam_theta: float = 0.0) -> Tensor:
    """sum_k -ln sigmoid(x_pos - x_neg) + lam_theta * ||Theta||^2."""
    x_pos, x_neg = nx.as_tensor(x_pos), nx.as_tensor(x_neg)
    loss = -nx.sum_(nx.log_sigmoid(x_pos - x_neg))
    if lam_theta and params:
        reg = None
        for p in params:
            term = nx.sum_(p * p)
            reg = term if reg is None else reg + term
        loss = loss + nx.scale(reg, lam_theta)
    return loss


def infonce_alignment_loss(aligned: Sequence, targets: Sequence, tau: float) -> Tensor:
    """In-batch InfoNCE over layers.

    ``aligned[l]`` and ``targets[l]`` are [N, d'] for each layer; row k of
    ``aligned`` is pulled toward row k of ``targets`` and pushed from the
    other rows, with cosine similarity scaled by 1 / tau.
    """
    if tau <= 0:
        raise AlignmentError("temperature must be positive")
    if len(aligned) != len(targets) or not aligned:
        raise AlignmentError("need matching, non-empty per-layer lists")
    total = None
    N = nx.as_tensor(aligned[0]).shape[0]
    if N < 1:
        raise AlignmentError("empty batch")
    eye = np.eye(N)
    for a, t in zip(aligned, targets):
        a, t = nx.as_tensor(a), nx.as_tensor(t)
        if a.shape != t.shape or a.shape[0] != N:
            raise AlignmentError(f"shape mismatch {a.shape} vs {t.shape}")
        sims = nx.cosine_similarity(nx.reshape(a, (N, 1, a.shape[1])), nx.reshape(t, (1, N, t.shape[1])))
        logits = nx.scale(sims, 1.0 / tau)
        per_layer = nx.sum_(nx.logsumexp(logits, axis=-1)) - nx.sum_(logits * Tensor(eye))
        total = per_layer if total is None else total + per_layer
    return nx.scale(total, 1.0 / (N * len(aligned)))


def total_loss(l_p, l_ua, l_ia, lam: float):
    """L = L_p + lam (L_ua + L_ia)."""
    if isinstance(l_p, Tensor) or isinstance(l_ua, Tensor) or isinstance(l_ia, Tensor):
        return nx.as_tensor(l_p) + nx.scale(nx.as_tensor(l_ua) + nx.as_tensor(l_ia), lam)
    return l_p + lam * (l_ua + l_ia)


# model -----------------------------------------------------------------------------


class AlignedModel:
    """Frozen encoder + frozen ID embeddings + trainable alignment parameters."""

    def __init__(self, encoder: Encoder, id_embeddings: IdEmbeddings, params: AlignmentParams,
                 titles: Sequence[str], *, max_history: int = DEFAULT_MAX_HISTORY,
                 user_template: PromptTemplate | None = None,
                 item_template: PromptTemplate | None = None):
        self.encoder = encoder
        self.id_embeddings = id_embeddings
        self.params = params
        self.titles = list(titles)
        self.max_history = max_history
        self.user_template = user_template or default_user_template()
        self.item_template = item_template or default_item_template()
        self._item_tokens: list[list[int]] | None = None

    def user_prompt(self, history: Sequence[int]) -> str:
        return render_hard_prompt(self.user_template, [self.titles[i] for i in history], self.max_history)

    def item_prompt(self, item: int) -> str:
        return render_item_prompt(self.item_template, self.titles[item])

    def user_tokens(self, history: Sequence[int]) -> list[int]:
        return self.encoder.tokenize(self.user_prompt(history))

    @property
    def item_tokens(self) -> list[list[int]]:
        if self._item_tokens is None:
            self._item_tokens = [self.encoder.tokenize(self.item_prompt(i)) for i in range(len(self.titles))]
        return self._item_tokens

    def encode_users(self, histories: Sequence[Sequence[int]], tokens=None) -> SideEncoding:
        tokens = tokens if tokens is not None else [self.user_tokens(h) for h in histories]
        return encode_side(self.encoder, self.params, "user", tokens,
                           self.id_embeddings.user_embeddings(histories))

    def encode_items(self, items: Sequence[int]) -> SideEncoding:
        items = list(items)
        return encode_side(self.encoder, self.params, "item", [self.item_tokens[i] for i in items],
                           self.id_embeddings.item_table[items])

    # evaluation interface
    def user_vectors(self, histories: Sequence[Sequence[int]], batch_size: int = 128) -> np.ndarray:
        out = []
        for s in range(0, len(histories), batch_size):
            out.append(self.encode_users(histories[s:s + batch_size]).final.data)
        return np.concatenate(out)

    def item_vectors(self, batch_size: int = 256) -> np.ndarray:
        M = len(self.titles)
        return np.concatenate([self.encode_items(range(s, min(M, s + batch_size))).final.data
                               for s in range(0, M, batch_size)])


def encode_user(model: AlignedModel, history: Sequence[int]) -> SideEncoding:
    if not history:
        raise AlignmentError("empty history")
    return model.encode_users([history])


def encode_item(model: AlignedModel, item: int) -> SideEncoding:
    if not 0 <= item < len(model.titles):
        raise AlignmentError(f"unknown item {item}")
    return model.encode_items([item])


class TextOnlyModel:
    """Hard-prompt-only baseline: the frozen encoder without ID injection."""

    def __init__(self, encoder: Encoder, titles: Sequence[str], max_history: int = DEFAULT_MAX_HISTORY,
                 user_template: PromptTemplate | None = None, item_template: PromptTemplate | None = None):
        self.encoder = encoder
        self.titles = list(titles)
        self.max_history = max_history
        self.user_template = user_template or default_user_template()
        self.item_template = item_template or default_item_template()

    def user_vectors(self, histories, batch_size: int = 128) -> np.ndarray:
        toks = [self.encoder.tokenize(render_hard_prompt(self.user_template, [self.titles[i] for i in h],
                                                         self.max_history)) for h in histories]
        return plain_pooled(self.encoder, toks, batch_size)[:, -1]

    def item_vectors(self, batch_size: int = 256) -> np.ndarray:
        toks = [self.encoder.tokenize(render_item_prompt(self.item_template, t)) for t in self.titles]
        return plain_pooled(self.encoder, toks, batch_size)[:, -1]


class IdOnlyModel:
    """The frozen ID model ranking on its own."""

    def __init__(self, id_embeddings: IdEmbeddings):
        self.id_embeddings = id_embeddings

    def user_vectors(self, histories, batch_size: int = 512) -> np.ndarray:
        return np.concatenate([self.id_embeddings.user_embeddings(histories[s:s + batch_size])
                               for s in range(0, len(histories), batch_size)])

    def item_vectors(self) -> np.ndarray:
        return self.id_embeddings.item_table.copy()


# training --------------------------------------------------------------------------


@dataclass
class LossRecord:
    step: int
    l_p: float
    l_ua: float
    l_ia: float
    total: float


@dataclass
class TrainingResult:
    params: AlignmentParams
    history: list[LossRecord] = field(default_factory=list)
    cosine_before: float = float("nan")
    cosine_after: float = float("nan")

    def loss_log_lines(self) -> list[str]:
        return [f"{r.step}\t{r.l_p!r}\t{r.l_ua!r}\t{r.l_ia!r}\t{r.total!r}" for r in self.history]


class _SampleCache:
    """Token ids, ID vectors and plain-encoding targets, computed once per sample."""

    def __init__(self, model: AlignedModel, samples):
        self.samples = list(samples)
        self.histories = [list(s.history) for s in self.samples]
        self.user_tokens = [model.user_tokens(h) for h in self.histories]
        self.user_ids = np.concatenate([model.id_embeddings.user_embeddings(self.histories[s:s + 512])
                                        for s in range(0, len(self.histories), 512)])
        self.user_targets = plain_pooled(model.encoder, self.user_tokens)
        self.item_targets = plain_pooled(model.encoder, model.item_tokens)


def _batch_losses(model: AlignedModel, cache: _SampleCache, idx: np.ndarray, negatives: np.ndarray,
                  hp: AlignmentHyperparams):
    params = model.params
    samples = [cache.samples[k] for k in idx]
    pos = np.array([s.positive for s in samples])
    neg = negatives[idx]
    users = encode_side(model.encoder, params, "user", [cache.user_tokens[k] for k in idx], cache.user_ids[idx])
    items = model.encode_items(np.concatenate([pos, neg]))
    N = len(idx)
    h_pos = nx.embedding(items.final, np.arange(N))
    h_neg = nx.embedding(items.final, np.arange(N, 2 * N))
    l_p = bpr_loss(score(users.final, h_pos), score(users.final, h_neg),
                   list(params.tensors.values()), hp.lam_theta)
    L = model.encoder.num_layers
    l_ua = infonce_alignment_loss(users.aligned, [cache.user_targets[idx, l] for l in range(1, L + 1)], hp.tau)
    pos_aligned = [nx.embedding(a, np.arange(N)) for a in items.aligned]
    l_ia = infonce_alignment_loss(pos_aligned, [cache.item_targets[pos, l] for l in range(1, L + 1)], hp.tau)
    return l_p, l_ua, l_ia


def batch_total_loss(model: AlignedModel, samples, hp: AlignmentHyperparams) -> tuple[Tensor, Tensor, Tensor, Tensor]:
    """(total, L_p, L_ua, L_ia) on an explicit batch of samples with fixed negatives."""
    cache = _SampleCache(model, samples)
    neg = np.array([s.negative for s in cache.samples])
    l_p, l_ua, l_ia = _batch_losses(model, cache, np.arange(len(cache.samples)), neg, hp)
    return total_loss(l_p, l_ua, l_ia, hp.lam), l_p, l_ua, l_ia


def mean_alignment_cosine(model: AlignedModel, samples, batch_size: int = 128) -> float:
    """Mean over layers 1..L, both sides, of cos(pooled injected vector, text state)."""
    cache = _SampleCache(model, samples)
    L = model.encoder.num_layers
    sims = []
    for s in range(0, len(cache.samples), batch_size):
        idx = np.arange(s, min(len(cache.samples), s + batch_size))
        users = encode_side(model.encoder, model.params, "user", [cache.user_tokens[k] for k in idx],
                            cache.user_ids[idx])
        pos = np.array([cache.samples[k].positive for k in idx])
        items = model.encode_items(pos)
        for l in range(1, L + 1):
            for enc, tgt in ((users, cache.user_targets[idx, l]), (items, cache.item_targets[pos, l])):
                a = enc.aligned[l - 1].data
                sims.append(np.sum(a * tgt, axis=1) / (np.linalg.norm(a, axis=1) * np.linalg.norm(tgt, axis=1)))
    return float(np.mean(np.concatenate(sims)))


def train_alignment(model: AlignedModel, samples, hp: AlignmentHyperparams, *,
                    seen: Sequence[set[int]] | None = None, holdout=None,
                    log_every: int = 50) -> TrainingResult:
    """Optimise only ``model.params``; encoder and ID embeddings stay bit-identical.

    ``seen[u]`` lists the items user ``u`` interacted with (negatives are
    drawn outside it, redrawn every epoch). ``holdout`` samples, if given,
    are used to measure the alignment cosine before and after training.
    """
    if not samples:
        raise AlignmentError("no training samples")
    if not model.id_embeddings.frozen:
        raise FrozenError("ID embeddings must be frozen before alignment training")
    enc_sum = model.encoder.weights.checksum()
    id_sum = model.id_embeddings.checksum()
    rng = np.random.default_rng(hp.rng_seed)
    cache = _SampleCache(model, samples)
    M = len(model.titles)
    if seen is None:
        seen_by_user: dict[int, set[int]] = {}
        for s in cache.samples:
            seen_by_user.setdefault(s.user, set()).update(s.history)
            seen_by_user[s.user].add(s.positive)
    else:
        seen_by_user = {s.user: seen[s.user] for s in cache.samples}
    result = TrainingResult(model.params)
    if holdout:
        result.cosine_before = mean_alignment_cosine(model, holdout)
    params = model.params.tensors
    state = nx.OptimizerState(lr=hp.lr, total_steps=hp.steps, weight_decay=hp.weight_decay,
                              beta1=hp.beta1, beta2=hp.beta2)
    n = len(cache.samples)
    bs = min(hp.batch_size, n)
    order, cursor, negatives = np.empty(0, dtype=np.int64), n, None
    for step in range(hp.steps):
        if cursor + bs > n:
            order = rng.permutation(n)
            cursor = 0
            negatives = np.array([_draw_negative(rng, M, seen_by_user[s.user]) for s in cache.samples])
        idx = order[cursor:cursor + bs]
        cursor += bs
        l_p, l_ua, l_ia = _batch_losses(model, cache, idx, negatives, hp)
        loss = total_loss(l_p, l_ua, l_ia, hp.lam)
        values = (l_p.item(), l_ua.item(), l_ia.item(), loss.item())
        if not all(math.isfinite(v) for v in values):
            raise NonFiniteLoss(f"non-finite loss at step {step}: {values}")
        grads = nx.backward(loss, params)
        nx.optimizer_step(params, grads, state)
        result.history.append(LossRecord(step, *values))
        if log_every and step % log_every == 0:
            log.info("step %d L_p %.4f L_ua %.4f L_ia %.4f total %.4f", step, *values)
    for t in params.values():
        t.grad = None
    if model.encoder.weights.checksum() != enc_sum:
        raise FrozenError("encoder weights changed during alignment training")
    if model.id_embeddings.checksum() != id_sum:
        raise FrozenError("ID embeddings changed during alignment training")
    if holdout:
        result.cosine_after = mean_alignment_cosine(model, holdout)
    return result


def _draw_negative(rng: np.random.Generator, num_items: int, exclude: set[int]) -> int:
    if len(exclude) >= num_items:
        raise AlignmentError("no negative item available")
    while True:
        j = int(rng.integers(num_items))
        if j not in exclude:
            return j


def trainable_parameter_count(num_layers: int, id_dim: int, hidden_dim: int, prefix_len: int) -> int:
    """Closed form for the full variant: 2(L+1)(d'd + d') + 2(L+1) P d'."""
    return 2 * (num_layers + 1) * (hidden_dim * id_dim + hidden_dim) + 2 * (num_layers + 1) * prefix_len * hidden_dim
