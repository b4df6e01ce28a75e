"""Item-wise modifier: Keep/Delete/Insert decisions and the copy-augmented reverse generator."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Rng, Tensor
from .corruption import CorruptionExample, Op
from .encoder import Encoder, EncodedSequence, TransformerBlock, pad_batch, run_blocks


class ModifierMode(str, enum.Enum):
    CLOUD = "cloud"
    VARIANT1 = "variant1"  # no copy mechanism
    VARIANT2 = "variant2"  # no shared representation
    STEAM = "steam"  # neither

    @property
    def shared_repr(self) -> bool:
        return self in (ModifierMode.CLOUD, ModifierMode.VARIANT1)

    @property
    def copy(self) -> bool:
        return self in (ModifierMode.CLOUD, ModifierMode.VARIANT2)

    @property
    def uses_neighbors(self) -> bool:
        return self is not ModifierMode.STEAM


@dataclass
class ModifiedSequence:
    items: list[int]
    provenance: list[str]  # "kept" | "inserted", aligned with items
    operations: list[Op]  # one per input position
    insertions: dict[int, list[int]] = field(default_factory=dict)  # input position -> inserted items, in order

    def to_json(self) -> dict:
        return {
            "items": self.items,
            "provenance": self.provenance,
            "operations": [int(o) for o in self.operations],
        }


@dataclass
class NeighborContext:
    """Encoded neighbors laid out as (B, K, ...) with presence flags."""

    hidden: Tensor | None  # (B, K, Ln, e)
    key_mask: np.ndarray  # (B, K, Ln)
    present: np.ndarray  # (B, K) bool
    pooled: Tensor | None  # (B, K, e): mean over each neighbor's real rows
    counts: np.ndarray  # (B, V_gen): occurrences of each generator-vocab item in the neighbors

    @property
    def any(self) -> bool:
        return bool(self.present.any())


class Modifier:
    def __init__(self, encoder: Encoder, n_items: int, dim: int, gen_layers: int, heads: int, rng: Rng,
                 mode: ModifierMode = ModifierMode.CLOUD, max_insert_run: int = 5,
                 max_modified_len: int = 60, dropout: float = 0.5, ffn_mult: int = 4,
                 activation: str = "gelu", anchor_from_shared: bool = False):
        self.encoder = encoder
        self.n_items = n_items
        self.eos = n_items + 2
        self.mode = ModifierMode(mode)
        self.max_insert_run = max_insert_run
        self.max_modified_len = max_modified_len
        self.dropout = dropout
        self.anchor_from_shared = anchor_from_shared
        self.gate_override: tuple[float, float] | None = None
        # generator output vocabulary: real items then [eos]
        self.gen_vocab = np.concatenate([np.arange(1, n_items + 1), [self.eos]])
        self.op_proj = Parameter(ad.xavier_init((3, dim), rng), name="modifier.op_proj")
        self.gen_blocks = [
            TransformerBlock(f"modifier.gen.block{i}", dim, heads, ffn_mult * dim, rng, activation)
            for i in range(gen_layers)
        ]
        self.w_co = Parameter(ad.xavier_init((dim, dim), rng), name="modifier.w_co")
        self.u_co = Parameter(ad.xavier_init((dim, dim), rng), name="modifier.u_co")
        self.v_co = Parameter(ad.xavier_init((dim, 1), rng), name="modifier.v_co")
        self.gate_co = Parameter(ad.xavier_init((2, dim), rng), name="modifier.gate_co")
        self.gate_all = Parameter(ad.xavier_init((2, dim), rng), name="modifier.gate_all")

    def parameters(self) -> list[Parameter]:
        out = [self.op_proj]
        for b in self.gen_blocks:
            out.extend(b.parameters())
        out += [self.w_co, self.u_co, self.v_co, self.gate_co, self.gate_all]
        return out

    def gen_index(self, item: int) -> int:
        return self.n_items if item == self.eos else item - 1

    # ------------------------------------------------------------ neighbors

    def encode_neighbors(self, neighbor_seqs: Sequence[Sequence[Sequence[int]]], rng: Rng | None,
                         training: bool) -> NeighborContext:
        b = len(neighbor_seqs)
        k = max([0] + [len(n) for n in neighbor_seqs])
        present = np.zeros((b, k), dtype=bool)
        counts = np.zeros((b, self.n_items + 1))
        # identical neighbor sequences within a batch are encoded once
        flat, slots, which, seen = [], [], [], {}
        for i, nbrs in enumerate(neighbor_seqs):
            for j, s in enumerate(nbrs):
                present[i, j] = True
                key = tuple(s)
                if key not in seen:
                    seen[key] = len(flat)
                    flat.append(list(s))
                slots.append(i * k + j)
                which.append(seen[key])
                np.add.at(counts[i], np.asarray(s, dtype=np.int64) - 1, 1.0)
        if not flat:
            return NeighborContext(None, np.zeros((b, k, 1), dtype=bool), present, None, counts)
        ids, mask = pad_batch(flat)
        enc = self.encoder.encode(ids, mask, self.dropout, rng, training)
        ln, dim = ids.shape[1], enc.hidden.shape[-1]
        # scatter compact encodings into the (B*K) layout; absent slots read a zero row
        lookup = np.full(b * k, len(flat), dtype=np.int64)
        lookup[slots] = which
        padded = ad.concat([enc.hidden, Tensor(np.zeros((1, ln, dim)))], axis=0)
        hidden = ad.reshape(ad.index_select(padded, lookup, 0), (b, k, ln, dim))
        full_mask = np.zeros((b * k, ln), dtype=bool)
        full_mask[slots] = mask[which]
        full_mask = full_mask.reshape(b, k, ln)
        weights = full_mask / np.maximum(full_mask.sum(-1, keepdims=True), 1)
        pooled = ad.reshape(ad.mul(hidden, weights[..., None]), (b, k, ln, dim))
        pooled = ad.sum(pooled, axis=2)
        return NeighborContext(hidden, full_mask, present, pooled, counts)

    # ------------------------------------------------------------ operations

    def shared_representation(self, target: EncodedSequence, nbr: NeighborContext) -> Tensor:
        """Target rows plus their attention-pooled neighbor rows, averaged over neighbors."""
        h = target.hidden
        if nbr.hidden is None or not nbr.any:
            return h
        b, lm, dim = h.shape
        scores = ad.matmul(ad.reshape(h, (b, 1, lm, dim)), ad.transpose(nbr.hidden))  # (B,K,Lm,Ln)
        bias = np.where(nbr.key_mask[:, :, None, :], 0.0, ad.NEG_INF)
        attn = ad.softmax(ad.add(scores, bias), axis=-1)
        mixed = ad.matmul(attn, nbr.hidden)  # (B,K,Lm,e)
        k_actual = np.maximum(nbr.present.sum(1), 1).astype(float)
        weight = nbr.present / k_actual[:, None]
        return ad.add(h, ad.sum(ad.mul(mixed, weight[:, :, None, None]), axis=1))

    def operation_logits(self, rep: Tensor) -> Tensor:
        return ad.linear(rep, self.op_proj)

    def operation_distribution(self, rep: Tensor) -> Tensor:
        return ad.softmax(self.operation_logits(rep), axis=-1)

    # ------------------------------------------------------------ reverse generator

    def generator_hidden(self, anchors: Tensor, prefix_ids: np.ndarray, step_mask: np.ndarray,
                         rng: Rng | None, training: bool) -> Tensor:
        """anchors (G, e); prefix_ids (G, T-1) already generated items. Returns H_c (G, T, e)."""
        g, dim = anchors.shape
        t = prefix_ids.shape[1] + 1
        parts = [ad.reshape(anchors, (g, 1, dim))]
        if t > 1:
            parts.append(ad.embedding_lookup(self.encoder.item_emb, prefix_ids))
        h0 = ad.add(ad.concat(parts, axis=1), ad.index_select(self.encoder.pos_emb, np.arange(t), 0))
        h0 = ad.dropout(h0, self.dropout, rng, training)
        h, _ = run_blocks(self.gen_blocks, h0, step_mask, True, self.dropout, rng, training)
        return h

    def copy_distribution(self, h_n: Tensor, pooled: Tensor | None, present: np.ndarray,
                          counts: np.ndarray) -> Tensor:
        """Insertion distribution over (items + [eos]).

        h_n (G, T, e); pooled (G, K, e); present (G, K); counts (G, V_gen).
        Rows with no neighbors, and every row outside copy modes, get P_all.
        """
        gen_emb = ad.embedding_lookup(self.encoder.item_emb, self.gen_vocab)  # (V, e)
        logits = ad.matmul(h_n, ad.transpose(gen_emb))  # (G, T, V)
        p_all = ad.softmax(logits, axis=-1)
        if not self.mode.copy or pooled is None or not present.any():
            return p_all
        g, t, dim = h_n.shape
        k = pooled.shape[1]
        wk = ad.linear(pooled, self.w_co)  # (G,K,e)
        uh = ad.linear(h_n, self.u_co)  # (G,T,e)
        act = ad.tanh(ad.add(ad.reshape(wk, (g, 1, k, dim)), ad.reshape(uh, (g, t, 1, dim))))
        e_kn = ad.reshape(ad.matmul(act, self.v_co), (g, t, k))
        a_kn = ad.softmax(ad.add(e_kn, np.where(present[:, None, :], 0.0, ad.NEG_INF)), axis=-1)
        ctx = ad.matmul(a_kn, pooled)  # (G,T,e)
        gate = ad.softmax(ad.add(ad.linear(ctx, self.gate_co), ad.linear(h_n, self.gate_all)), axis=-1)
        has = present.any(axis=1).astype(float)[:, None, None]
        fixed = np.array([0.0, 1.0])
        if self.gate_override is not None:
            gate = Tensor(np.broadcast_to(np.asarray(self.gate_override, dtype=float), (g, t, 2)))
        else:
            gate = ad.add(ad.mul(gate, has), fixed * (1.0 - has))
        log_counts = np.where(counts > 0, np.log(np.maximum(counts, 1e-300)), ad.NEG_INF)
        p_col = ad.softmax(ad.add(logits, log_counts[:, None, :]), axis=-1)
        return ad.add(ad.mul(ad.index_select(gate, [0], -1), p_col), ad.mul(ad.index_select(gate, [1], -1), p_all))

    # ------------------------------------------------------------ training loss

    def loss(self, examples: Sequence[CorruptionExample], neighbor_seqs, rng: Rng | None,
             training: bool = True) -> Tensor:
        """Summed operation NLL plus teacher-forced insertion NLL over the batch."""
        seqs = [ex.corrupted for ex in examples]
        ids, mask = pad_batch(seqs)
        target = self.encoder.encode(ids, mask, self.dropout, rng, training)
        nbr = self._neighbors(neighbor_seqs, len(examples), rng, training)
        rep = self.shared_representation(target, nbr) if self.mode.shared_repr else target.hidden
        labels = np.zeros(ids.shape, dtype=np.int64)
        for i, ex in enumerate(examples):
            labels[i, : len(ex.labels)] = [int(x) for x in ex.labels]
        total = ad.cross_entropy(self.operation_logits(rep), labels, mask)

        rows = [(i, pos, tgt) for i, ex in enumerate(examples) for pos, tgt in sorted(ex.insert_targets.items())]
        if not rows:
            return total
        b, lm, dim = target.hidden.shape
        anchor_src = rep if self.anchor_from_shared else target.hidden
        flat = ad.reshape(anchor_src, (b * lm, dim))
        anchors = ad.index_select(flat, [i * lm + pos for i, pos, _ in rows], 0)
        tmax = max(len(t) for _, _, t in rows)
        prefix = np.zeros((len(rows), tmax - 1), dtype=np.int64)
        tgt_idx = np.zeros((len(rows), tmax), dtype=np.int64)
        step_mask = np.zeros((len(rows), tmax), dtype=bool)
        for r, (_, _, tgt) in enumerate(rows):
            prefix[r, : len(tgt) - 1] = tgt[:-1]
            tgt_idx[r, : len(tgt)] = [self.gen_index(x) for x in tgt]
            step_mask[r, : len(tgt)] = True
        h_c = self.generator_hidden(anchors, prefix, step_mask, rng, training)
        owner = np.array([i for i, _, _ in rows])
        probs = self._gen_probs(h_c, nbr, owner)
        picked = ad.pick(probs, tgt_idx)
        safe = ad.add(picked, np.where(step_mask, 0.0, 1.0))  # log(1) = 0 at padded steps
        return ad.sub(total, ad.sum(ad.mul(ad.log(safe), step_mask.astype(float))))

    def _neighbors(self, neighbor_seqs, batch: int, rng, training) -> NeighborContext:
        if neighbor_seqs is None or not self.mode.uses_neighbors:
            neighbor_seqs = [[] for _ in range(batch)]
        return self.encode_neighbors(neighbor_seqs, rng, training)

    def _gen_probs(self, h_c: Tensor, nbr: NeighborContext, owner: np.ndarray) -> Tensor:
        pooled = ad.index_select(nbr.pooled, owner, 0) if nbr.pooled is not None else None
        return self.copy_distribution(h_c, pooled, nbr.present[owner], nbr.counts[owner])

    # ------------------------------------------------------------ greedy decode

    def modify(self, seqs: Sequence[Sequence[int]], neighbor_seqs=None) -> list[ModifiedSequence]:
        """Greedy edit of each sequence; runs outside any tape in eval mode."""
        if not seqs:
            return []
        with ad.no_tape():
            assert ad.active_tape() is None
            return self._modify(seqs, neighbor_seqs)

    def decide(self, seqs, neighbor_seqs=None):
        ids, mask = pad_batch(seqs)
        target = self.encoder.encode(ids, mask)
        nbr = self._neighbors(neighbor_seqs, len(seqs), None, False)
        rep = self.shared_representation(target, nbr) if self.mode.shared_repr else target.hidden
        probs = self.operation_distribution(rep).data
        return target, nbr, rep, probs

    def _modify(self, seqs, neighbor_seqs) -> list[ModifiedSequence]:
        target, nbr, rep, probs = self.decide(seqs, neighbor_seqs)
        ops = probs.argmax(-1)
        b, lm, dim = target.hidden.shape
        anchor_src = (rep if self.anchor_from_shared else target.hidden).data.reshape(b * lm, dim)
        rows = [(i, t) for i, s in enumerate(seqs) for t in range(len(s)) if ops[i, t] == Op.INSERT]
        generated = self._generate(anchor_src, rows, lm, nbr)

        out = []
        for i, s in enumerate(seqs):
            operations = [Op(int(o)) for o in ops[i, : len(s)]]
            originals = sum(1 for o in operations if o != Op.DELETE)
            budget = max(self.max_modified_len - originals, 0)
            items, prov, inserted = [], [], {}
            for t, (item, op) in enumerate(zip(s, operations)):
                if op == Op.DELETE:
                    continue
                if op == Op.INSERT:
                    gen = generated.get((i, t), [])[:budget]
                    budget -= len(gen)
                    run = gen[::-1]
                    inserted[t] = run
                    items.extend(run)
                    prov.extend(["inserted"] * len(run))
                items.append(int(item))
                prov.append("kept")
            out.append(ModifiedSequence(items, prov, operations, inserted))
        return out

    def _generate(self, anchor_src: np.ndarray, rows, lm: int, nbr: NeighborContext) -> dict:
        """Greedy reverse generation; returns (seq, pos) -> items nearest-first."""
        results: dict = {r: [] for r in rows}
        active = list(rows)
        for _ in range(self.max_insert_run):
            if not active:
                break
            owner = np.array([i for i, _ in active])
            anchors = Tensor(anchor_src[[i * lm + t for i, t in active]])
            prefix = np.array([results[r] for r in active], dtype=np.int64).reshape(len(active), -1)
            step_mask = np.ones((len(active), prefix.shape[1] + 1), dtype=bool)
            h_c = self.generator_hidden(anchors, prefix, step_mask, None, False)
            last = ad.index_select(h_c, [prefix.shape[1]], 1)
            probs = self._gen_probs(last, nbr, owner).data[:, 0, :]
            choice = probs.argmax(-1)
            still = []
            for r, c in zip(active, choice):
                item = int(self.gen_vocab[c])
                if item == self.eos:
                    continue
                results[r].append(item)
                still.append(r)
            active = still
        return results
