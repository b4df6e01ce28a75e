"""Item + position embedding and pre-LN transformer blocks."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Rng, Tensor


class SequenceLengthError(ValueError):
    pass


def pad_batch(seqs, pad: int = 0, min_len: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """Right-pad integer sequences; returns (ids, key_mask) with True at real tokens."""
    width = max([min_len] + [len(s) for s in seqs])
    ids = np.full((len(seqs), width), pad, dtype=np.int64)
    mask = np.zeros((len(seqs), width), dtype=bool)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = s
        mask[i, : len(s)] = True
    return ids, mask


def attention_bias(key_mask: np.ndarray, causal: bool) -> np.ndarray:
    """Additive bias of shape (B, 1, L, L): 0 where attention is allowed."""
    b, length = key_mask.shape
    allowed = np.broadcast_to(key_mask[:, None, None, :], (b, 1, length, length))
    if causal:
        allowed = allowed & np.tril(np.ones((length, length), dtype=bool))
    return np.where(allowed, 0.0, ad.NEG_INF)


class TransformerBlock:
    def __init__(self, name: str, dim: int, heads: int, ffn_dim: int, rng: Rng, activation: str = "gelu"):
        if dim % heads:
            raise ValueError(f"embedding dim {dim} is not divisible by {heads} heads")
        if activation not in ("gelu", "relu"):
            raise ValueError(f"unknown activation {activation!r}")
        self.dim, self.heads, self.activation = dim, heads, activation

        def p(suffix, arr):
            return Parameter(arr, name=f"{name}.{suffix}")

        self.params = {
            "ln1_g": p("ln1_g", np.ones(dim)),
            "ln1_b": p("ln1_b", np.zeros(dim)),
            "wq": p("wq", ad.xavier_init((dim, dim), rng)),
            "wk": p("wk", ad.xavier_init((dim, dim), rng)),
            "wv": p("wv", ad.xavier_init((dim, dim), rng)),
            "wo": p("wo", ad.xavier_init((dim, dim), rng)),
            "bq": p("bq", np.zeros(dim)),
            "bk": p("bk", np.zeros(dim)),
            "bv": p("bv", np.zeros(dim)),
            "bo": p("bo", np.zeros(dim)),
            "ln2_g": p("ln2_g", np.ones(dim)),
            "ln2_b": p("ln2_b", np.zeros(dim)),
            "w1": p("w1", ad.xavier_init((ffn_dim, dim), rng)),
            "b1": p("b1", np.zeros(ffn_dim)),
            "w2": p("w2", ad.xavier_init((dim, ffn_dim), rng)),
            "b2": p("b2", np.zeros(dim)),
        }

    def parameters(self) -> list[Parameter]:
        return list(self.params.values())

    def _split(self, x: Tensor) -> Tensor:
        b, length, _ = x.shape
        return ad.transpose(ad.reshape(x, (b, length, self.heads, self.dim // self.heads)), (0, 2, 1, 3))

    def attend(self, h: Tensor, bias: np.ndarray) -> tuple[Tensor, Tensor]:
        p = self.params
        b, length, _ = h.shape
        q = self._split(ad.linear(h, p["wq"], p["bq"]))
        k = self._split(ad.linear(h, p["wk"], p["bk"]))
        v = self._split(ad.linear(h, p["wv"], p["bv"]))
        scores = ad.scale(q @ ad.transpose(k), 1.0 / np.sqrt(self.dim // self.heads))
        weights = ad.softmax(ad.add(scores, bias), axis=-1)
        ctx = ad.reshape(ad.transpose(weights @ v, (0, 2, 1, 3)), (b, length, self.dim))
        return ad.linear(ctx, p["wo"], p["bo"]), weights

    def __call__(self, x: Tensor, key_mask: np.ndarray, causal: bool, dropout: float, rng: Rng | None, training: bool):
        p = self.params
        attn, weights = self.attend(ad.layer_norm(x, p["ln1_g"], p["ln1_b"]), attention_bias(key_mask, causal))
        x = ad.add(x, ad.dropout(attn, dropout, rng, training))
        h = ad.linear(ad.layer_norm(x, p["ln2_g"], p["ln2_b"]), p["w1"], p["b1"])
        h = ad.gelu(h) if self.activation == "gelu" else ad.relu(h)
        x = ad.add(x, ad.dropout(ad.linear(h, p["w2"], p["b2"]), dropout, rng, training))
        return x, weights


def run_blocks(blocks, x, key_mask, causal, dropout, rng, training):
    weights = None
    for block in blocks:
        x, weights = block(x, key_mask, causal, dropout, rng, training)
    return x, weights


@dataclass
class EncodedSequence:
    hidden: Tensor  # (B, L, e)
    key_mask: np.ndarray  # (B, L), True at real tokens
    attention: Tensor | None = field(default=None, repr=False)


class Encoder:
    """Shared embedding tables plus a bidirectional transformer stack."""

    def __init__(self, vocab_size: int, dim: int, max_positions: int, layers: int, heads: int,
                 rng: Rng, ffn_mult: int = 4, activation: str = "gelu"):
        self.dim = dim
        self.max_positions = max_positions
        self.item_emb = Parameter(ad.xavier_init((vocab_size, dim), rng), name="encoder.item_emb")
        self.pos_emb = Parameter(ad.xavier_init((max_positions, dim), rng), name="encoder.pos_emb")
        self.blocks = [
            TransformerBlock(f"encoder.block{i}", dim, heads, ffn_mult * dim, rng, activation)
            for i in range(layers)
        ]

    def parameters(self) -> list[Parameter]:
        out = [self.item_emb, self.pos_emb]
        for b in self.blocks:
            out.extend(b.parameters())
        return out

    def embed(self, ids: np.ndarray, dropout: float = 0.0, rng: Rng | None = None, training: bool = False) -> Tensor:
        length = ids.shape[-1]
        if length > self.max_positions:
            raise SequenceLengthError(f"sequence length {length} exceeds position table ({self.max_positions})")
        h = ad.add(ad.embedding_lookup(self.item_emb, ids), ad.index_select(self.pos_emb, np.arange(length), 0))
        return ad.dropout(h, dropout, rng, training)

    def encode(self, ids: np.ndarray, key_mask: np.ndarray, dropout: float = 0.0,
               rng: Rng | None = None, training: bool = False) -> EncodedSequence:
        h = self.embed(ids, dropout, rng, training)
        h, weights = run_blocks(self.blocks, h, key_mask, False, dropout, rng, training)
        return EncodedSequence(h, key_mask, weights)

    def encode_lists(self, seqs, dropout: float = 0.0, rng: Rng | None = None, training: bool = False) -> EncodedSequence:
        ids, mask = pad_batch(seqs)
        return self.encode(ids, mask, dropout, rng, training)
