"""Masked-item recommender on top of the shared encoder."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Rng, Tensor
from .corruption import append_eval_mask
from .encoder import Encoder, TransformerBlock, pad_batch, run_blocks


class CandidateError(ValueError):
    pass


@dataclass
class RankingResult:
    candidates: list[int]  # positive first
    scores: list[float]
    rank: int

    @classmethod
    def from_scores(cls, candidates: Sequence[int], scores: Sequence[float]) -> "RankingResult":
        return cls(list(candidates), [float(s) for s in scores], pessimistic_rank(scores))


def pessimistic_rank(scores: Sequence[float]) -> int:
    """1-based rank of ``scores[0]``; negatives tied with it rank ahead."""
    s = np.asarray(scores, dtype=float)
    return int(1 + np.count_nonzero(s[1:] >= s[0]))


class Recommender:
    def __init__(self, encoder: Encoder, n_items: int, dim: int, layers: int, heads: int, rng: Rng,
                 directionality: str = "bi", dropout: float = 0.5, ffn_mult: int = 4, activation: str = "gelu"):
        if directionality not in ("bi", "uni"):
            raise ValueError(f"directionality must be 'bi' or 'uni', got {directionality!r}")
        self.encoder = encoder
        self.n_items = n_items
        self.mask_id = n_items + 1
        self.directionality = directionality
        self.dropout = dropout
        self.blocks = [
            TransformerBlock(f"recommender.block{i}", dim, heads, ffn_mult * dim, rng, activation)
            for i in range(layers)
        ]

    @property
    def causal(self) -> bool:
        return self.directionality == "uni"

    @property
    def mask_policy(self) -> str:
        return "last" if self.causal else "random"

    def parameters(self) -> list[Parameter]:
        out = []
        for b in self.blocks:
            out.extend(b.parameters())
        return out

    def forward(self, h_e: Tensor, key_mask: np.ndarray, rng: Rng | None = None, training: bool = False) -> Tensor:
        h, _ = run_blocks(self.blocks, h_e, key_mask, self.causal, self.dropout, rng, training)
        return h

    def item_logits(self, rows: Tensor) -> Tensor:
        """Scores over real items (column j is item j + 1)."""
        items = ad.embedding_lookup(self.encoder.item_emb, np.arange(1, self.n_items + 1))
        return ad.matmul(rows, ad.transpose(items))

    def masked_logits(self, ids: np.ndarray, h_r: Tensor, positions: Sequence[tuple[int, int]]) -> Tensor:
        for b, t in positions:
            if ids[b, t] != self.mask_id:
                raise ValueError(f"position ({b}, {t}) does not hold [mask]")
        b, length, dim = h_r.shape
        rows = ad.index_select(ad.reshape(h_r, (b * length, dim)), [i * length + t for i, t in positions], 0)
        return self.item_logits(rows)

    def loss(self, masked_seqs, positions, targets, rng: Rng | None, training: bool = True) -> Tensor:
        """Summed cross-entropy over every masked position of ``masked_seqs``.

        ``positions[i]`` / ``targets[i]`` list the masked positions of
        sequence i and the items originally there.
        """
        ids, mask = pad_batch(masked_seqs)
        enc = self.encoder.encode(ids, mask, self.dropout, rng, training)
        h_r = self.forward(enc.hidden, mask, rng, training)
        flat = [(i, t) for i, ps in enumerate(positions) for t in ps]
        tgt = np.array([x - 1 for ts in targets for x in ts], dtype=np.int64)
        return ad.cross_entropy(self.masked_logits(ids, h_r, flat), tgt)

    def next_item_scores(self, seqs: Sequence[Sequence[int]]) -> np.ndarray:
        """(B, n_items) scores for the item following each sequence."""
        with ad.no_tape():
            inputs = [append_eval_mask(s, self.mask_id) if len(s) else [self.mask_id] for s in seqs]
            ids, mask = pad_batch(inputs)
            enc = self.encoder.encode(ids, mask)
            h_r = self.forward(enc.hidden, mask)
            pos = [(i, len(s) - 1) for i, s in enumerate(inputs)]
            return self.masked_logits(ids, h_r, pos).data

    def score_next_item(self, seq: Sequence[int], positive: int, negatives: Sequence[int],
                        interacted: set[int] | None = None) -> RankingResult:
        if interacted is not None and any(n in interacted for n in negatives):
            raise CandidateError("negative candidates include interacted items")
        scores = self.next_item_scores([seq])[0]
        cands = [positive] + list(negatives)
        return RankingResult.from_scores(cands, scores[np.asarray(cands) - 1])
