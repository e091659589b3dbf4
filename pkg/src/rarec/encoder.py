"""A small bidirectional transformer encoder that stands in for the frozen LM.

Besides the plain forward pass the encoder accepts, per layer, extra
key/value rows (a *prefix*) that every text position may attend to. Prefix
rows produce no output rows and carry no position embedding.
"""
from __future__ import annotations

import hashlib
import logging
import math
import re
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .numerics import Tensor

log = logging.getLogger(__name__)

PAD_ID = 0
UNK_ID = 1
HASH_FUNCTION_ID = "blake2b64-mod"
_WORD_RE = re.compile(r"\w+", re.UNICODE)


class EncoderError(ValueError):
    pass


def words(text: str) -> list[str]:
    """Case-folded word tokens; shared with the data pipeline's overlap filter."""
    return _WORD_RE.findall(text.casefold())


def hash_word(word: str, vocab_size: int) -> int:
    digest = hashlib.blake2b(word.encode("utf-8"), digest_size=8).digest()
    return 2 + int.from_bytes(digest, "little") % (vocab_size - 2)


def tokenize(text: str, vocab_size: int = 8192) -> list[int]:
    """Lower-cased word tokens hashed into ``vocab_size`` buckets (0 = pad, 1 = unknown)."""
    return [hash_word(w, vocab_size) for w in words(text)]


@dataclass
class EncoderConfig:
    num_layers: int = 4
    hidden_dim: int = 64
    num_heads: int = 4
    ffn_dim: int = 128
    vocab_size: int = 8192
    max_sequence_length: int = 128
    rng_seed: int = 0
    # init std multiplier for the attention-output and second FFN projections;
    # small values keep the residual stream close to the token embeddings
    output_init_scale: float = 0.1

    def __post_init__(self):
        if self.hidden_dim % self.num_heads:
            raise EncoderError(f"hidden_dim {self.hidden_dim} not divisible by num_heads {self.num_heads}")
        if self.output_init_scale <= 0:
            raise EncoderError("output_init_scale must be positive")
        if self.vocab_size < 3:
            raise EncoderError("vocab_size must leave room for pad and unknown ids")


@dataclass
class LayerStates:
    """Hidden states h^(0..L); each entry is [batch, seq, hidden]."""

    layers: list[Tensor]
    mask: np.ndarray  # [batch, seq], 1.0 on real tokens
    extra: list[Tensor] = field(default_factory=list)  # per-layer states of prepended input rows

    @property
    def num_layers(self) -> int:
        return len(self.layers) - 1

    def __getitem__(self, l: int) -> Tensor:
        return self.layers[l]


def _weight_names(cfg: EncoderConfig) -> list[str]:
    names = ["tok_emb", "pos_emb", "emb_ln.g", "emb_ln.b"]
    for l in range(cfg.num_layers):
        p = f"layer{l}."
        names += [p + n for n in ("wq", "wk", "wv", "wo", "bo", "ln1.g", "ln1.b",
                                  "w1", "b1", "w2", "b2", "ln2.g", "ln2.b")]
    return names


class EncoderWeights:
    """Parameters phi of the encoder, frozen unless explicitly warmed."""

    def __init__(self, config: EncoderConfig, tensors: dict[str, Tensor]):
        self.config = config
        self.tensors = tensors
        expected = set(_weight_names(config))
        if set(tensors) != expected:
            raise EncoderError(f"weight set mismatch: missing {sorted(expected - set(tensors))[:3]}")

    @classmethod
    def initialize(cls, config: EncoderConfig) -> EncoderWeights:
        rng = np.random.default_rng(config.rng_seed)
        d, f = config.hidden_dim, config.ffn_dim

        def tn(shape, fan_in, gain=1.0):
            std = gain / math.sqrt(fan_in)
            return nx.init_trunc_normal(shape, -2 * std, 2 * std, std, rng)

        t: dict[str, Tensor] = {
            "tok_emb": tn((config.vocab_size, d), 1),
            "pos_emb": nx.init_trunc_normal((config.max_sequence_length, d), -0.4, 0.4, 0.2, rng),
            "emb_ln.g": Tensor(np.ones(d)),
            "emb_ln.b": Tensor(np.zeros(d)),
        }
        t["tok_emb"].data[PAD_ID] = 0.0
        for l in range(config.num_layers):
            p = f"layer{l}."
            for n in ("wq", "wk", "wv"):
                t[p + n] = tn((d, d), d)
            t[p + "wo"] = tn((d, d), d, config.output_init_scale)
            t[p + "bo"] = Tensor(np.zeros(d))
            t[p + "w1"] = tn((d, f), d)
            t[p + "b1"] = Tensor(np.zeros(f))
            t[p + "w2"] = tn((f, d), f, config.output_init_scale)
            t[p + "b2"] = Tensor(np.zeros(d))
            for ln in ("ln1", "ln2"):
                t[p + ln + ".g"] = Tensor(np.ones(d))
                t[p + ln + ".b"] = Tensor(np.zeros(d))
        for name, tensor in t.items():
            tensor.name = name
        return cls(config, t)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def set_trainable(self, flag: bool) -> None:
        for tensor in self.tensors.values():
            tensor.requires_grad = flag

    def checksum(self) -> str:
        return nx.checksum(self.tensors)

    def num_parameters(self) -> int:
        return sum(t.data.size for t in self.tensors.values())


class Encoder:
    def __init__(self, weights: EncoderWeights):
        self.weights = weights
        self.config = weights.config

    @property
    def num_layers(self) -> int:
        return self.config.num_layers

    @property
    def hidden_dim(self) -> int:
        return self.config.hidden_dim

    def tokenize(self, text: str) -> list[int]:
        return tokenize(text, self.config.vocab_size)

    def pad(self, sequences: list[list[int]]) -> tuple[np.ndarray, np.ndarray]:
        """Truncate to max_sequence_length (keeping the tail) and right-pad."""
        if not sequences or any(len(s) == 0 for s in sequences):
            raise EncoderError("cannot encode an empty token sequence")
        cap = self.config.max_sequence_length
        if any(len(s) > cap for s in sequences):
            log.warning("truncating input longer than %d tokens", cap)
            sequences = [s[-cap:] for s in sequences]
        width = max(len(s) for s in sequences)
        ids = np.full((len(sequences), width), PAD_ID, dtype=np.int64)
        mask = np.zeros((len(sequences), width), dtype=nx.DTYPE)
        for k, s in enumerate(sequences):
            ids[k, : len(s)] = s
            mask[k, : len(s)] = 1.0
        return ids, mask

    def embed_tokens(self, ids: np.ndarray) -> Tensor:
        w = self.weights
        tok = nx.embedding(w["tok_emb"], ids)
        pos = Tensor(w["pos_emb"].data[: ids.shape[1]]) if not w["pos_emb"].requires_grad else \
            nx.embedding(w["pos_emb"], np.arange(ids.shape[1]))
        return tok + pos

    def forward(self, ids: np.ndarray, mask: np.ndarray,
                prefixes: list[Tensor | None] | None = None,
                input_rows: Tensor | None = None) -> LayerStates:
        """Run the stack on a padded batch.

        ``prefixes[l]`` ([batch, P, d'] or None) widens the keys/values of the
        block whose input is h^(l); ``input_rows`` ([batch, R, d']) are
        prepended to the token embeddings at layer 0 and travel through the
        stack as ordinary (position-free) rows.
        """
        cfg = self.config
        w = self.weights
        L, d, H = cfg.num_layers, cfg.hidden_dim, cfg.num_heads
        B, T = ids.shape
        if prefixes is not None:
            if len(prefixes) not in (L, L + 1):
                raise EncoderError(f"expected {L + 1} per-layer prefixes, got {len(prefixes)}")
            for p in prefixes:
                if p is not None and (p.ndim != 3 or p.shape[0] != B or p.shape[2] != d):
                    raise EncoderError(f"prefix shape {p.shape} incompatible with batch {B}, hidden {d}")
        x = self.embed_tokens(ids)
        R = 0
        key_mask = mask
        if input_rows is not None:
            if input_rows.ndim != 3 or input_rows.shape[0] != B or input_rows.shape[2] != d:
                raise EncoderError(f"input rows shape {input_rows.shape} incompatible")
            R = input_rows.shape[1]
            x = nx.concat([input_rows, x], axis=1)
            key_mask = np.concatenate([np.ones((B, R)), mask], axis=1)
        h = nx.layer_norm(x, w["emb_ln.g"], w["emb_ln.b"])
        states = [h]
        for l in range(L):
            prefix = prefixes[l] if prefixes is not None else None
            if prefix is not None and prefix.shape[1] == 0:
                prefix = None
            h = self._block(l, h, key_mask, prefix)
            states.append(h)
        text = [s if R == 0 else _slice_rows(s, R, None) for s in states]
        extra = [_slice_rows(s, 0, R) for s in states] if R else []
        return LayerStates(text, mask, extra)

    def _block(self, l: int, h: Tensor, key_mask: np.ndarray, prefix: Tensor | None) -> Tensor:
        w = self.weights
        p = f"layer{l}."
        B, T, d = h.shape
        H = self.config.num_heads
        dh = d // H
        q = h @ w[p + "wq"]
        kv_in = h if prefix is None else nx.concat([prefix, h], axis=1)
        k = kv_in @ w[p + "wk"]
        v = kv_in @ w[p + "wv"]
        S = kv_in.shape[1]
        bias = np.where(key_mask > 0, 0.0, nx.MASK_VALUE)
        if prefix is not None:
            bias = np.concatenate([np.zeros((B, prefix.shape[1])), bias], axis=1)
        qh = nx.transpose(nx.reshape(q, (B, T, H, dh)), (0, 2, 1, 3))
        kh = nx.transpose(nx.reshape(k, (B, S, H, dh)), (0, 2, 3, 1))
        vh = nx.transpose(nx.reshape(v, (B, S, H, dh)), (0, 2, 1, 3))
        logits = nx.scale(qh @ kh, 1.0 / math.sqrt(dh)) + Tensor(bias[:, None, None, :])
        attn = nx.softmax(logits, axis=-1)
        ctx = nx.reshape(nx.transpose(attn @ vh, (0, 2, 1, 3)), (B, T, d))
        a = ctx @ w[p + "wo"] + w[p + "bo"]
        h = nx.layer_norm(h + a, w[p + "ln1.g"], w[p + "ln1.b"])
        f = nx.nonlinearity(h @ w[p + "w1"] + w[p + "b1"], "gelu") @ w[p + "w2"] + w[p + "b2"]
        return nx.layer_norm(h + f, w[p + "ln2.g"], w[p + "ln2.b"])

    def attention_weights(self, l: int, h: Tensor, key_mask: np.ndarray,
                          prefix: Tensor | None = None) -> np.ndarray:
        """Attention probabilities [batch, heads, T, P+T] of block ``l`` (diagnostics)."""
        w = self.weights
        p = f"layer{l}."
        B, T, d = h.shape
        H = self.config.num_heads
        dh = d // H
        kv_in = h.data if prefix is None else np.concatenate([prefix.data, h.data], axis=1)
        q = (h.data @ w[p + "wq"].data).reshape(B, T, H, dh).transpose(0, 2, 1, 3)
        k = (kv_in @ w[p + "wk"].data).reshape(B, -1, H, dh).transpose(0, 2, 3, 1)
        bias = np.where(key_mask > 0, 0.0, nx.MASK_VALUE)
        if prefix is not None:
            bias = np.concatenate([np.zeros((B, prefix.shape[1])), bias], axis=1)
        return nx.softmax(Tensor(q @ k / math.sqrt(dh) + bias[:, None, None, :])).data

    # single-sequence conveniences -------------------------------------------------

    def encode_plain(self, tokens: list[int]) -> LayerStates:
        ids, mask = self.pad([list(tokens)])
        return _squeeze(self.forward(ids, mask))

    def encode_with_prefix(self, tokens: list[int], prefixes: list[Tensor | np.ndarray]) -> LayerStates:
        """``prefixes[l]`` is a [P, d'] matrix for every layer l = 0..L."""
        ids, mask = self.pad([list(tokens)])
        batched = []
        for p in prefixes:
            p = nx.as_tensor(p)
            if p.ndim != 2 or p.shape[1] != self.hidden_dim:
                raise EncoderError(f"prefix hidden size {p.shape} != {self.hidden_dim}")
            batched.append(nx.reshape(p, (1,) + p.shape))
        if len(batched) != self.num_layers + 1:
            raise EncoderError(f"expected {self.num_layers + 1} per-layer prefixes, got {len(batched)}")
        return _squeeze(self.forward(ids, mask, batched))


def _slice_rows(t: Tensor, start: int, stop: int | None) -> Tensor:
    n = t.shape[1]
    stop = n if stop is None else stop

    def backward(g):
        full = np.zeros(t.shape)
        full[:, start:stop] = g
        nx._accumulate(t, full)

    return nx._make(t.data[:, start:stop], "slice", (t,), backward)


def _squeeze(states: LayerStates) -> LayerStates:
    return LayerStates([nx.reshape(s, s.shape[1:]) for s in states.layers], states.mask[0],
                       [nx.reshape(s, s.shape[1:]) for s in states.extra])


def pool(states: LayerStates, layer: int) -> Tensor:
    """Mean over real (unpadded) text positions of h^(layer)."""
    if not 0 <= layer <= states.num_layers:
        raise EncoderError(f"layer {layer} outside 0..{states.num_layers}")
    h = states.layers[layer]
    mask = states.mask
    if h.ndim == 2:
        return nx.mean(h, axis=0)
    m = mask / mask.sum(axis=1, keepdims=True)
    return nx.sum_(h * Tensor(m[:, :, None]), axis=1)


def pool_representation(states: LayerStates, layer: int) -> Tensor:
    return pool(states, layer)


def pool_all(states: LayerStates) -> list[Tensor]:
    return [pool(states, l) for l in range(states.num_layers + 1)]


def warm_up(weights: EncoderWeights, texts: list[str], steps: int, *, batch_size: int = 32,
            lr: float = 1e-3, mask_rate: float = 0.15, seed: int = 0) -> list[float]:
    """Brief masked-token training on ``texts`` (tied output embedding)."""
    if steps <= 0:
        return []
    enc = Encoder(weights)
    rng = np.random.default_rng(seed)
    token_lists = [t for t in (enc.tokenize(s) for s in texts) if len(t) >= 2]
    if not token_lists:
        return []
    weights.set_trainable(True)
    params = dict(weights.tensors)
    state = nx.OptimizerState(lr=lr, total_steps=steps, weight_decay=0.0)
    losses = []
    try:
        for _ in range(steps):
            batch = [token_lists[i] for i in rng.integers(0, len(token_lists), size=batch_size)]
            ids, mask = enc.pad(batch)
            target = ids.copy()
            chosen = (rng.random(ids.shape) < mask_rate) & (mask > 0)
            chosen[np.arange(len(batch)), rng.integers(0, [len(b) for b in batch])] = True
            inp = np.where(chosen, UNK_ID, ids)
            states = enc.forward(inp, mask)
            rows, cols = np.nonzero(chosen)
            h = states.layers[-1]
            picked = nx.reshape(h, (-1, h.shape[-1]))
            flat = rows * ids.shape[1] + cols
            sel = nx.embedding(picked, flat)
            logits = sel @ nx.transpose(weights["tok_emb"])
            loss = nx.mean(nx.logsumexp(logits, axis=-1)) - nx.mean(
                nx.sum_(sel * nx.embedding(weights["tok_emb"], target[rows, cols]), axis=-1))
            grads = nx.backward(loss, params)
            nx.optimizer_step(params, grads, state)
            weights["tok_emb"].data[PAD_ID] = 0.0
            losses.append(loss.item())
    finally:
        weights.set_trainable(False)
        for t in weights.tensors.values():
            t.grad = None
    return losses
