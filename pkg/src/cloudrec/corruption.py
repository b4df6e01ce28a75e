"""Self-supervised corruption for the modifier and masking for the recommender."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .autodiff import Rng


class Op(enum.IntEnum):
    KEEP = 0
    DELETE = 1
    INSERT = 2


@dataclass(frozen=True)
class CorruptionConfig:
    p_keep: float = 0.4
    p_delete: float = 0.5
    p_insert: float = 0.1
    p_mask: float = 0.5
    max_raw_len: int = 50
    max_insert_run: int = 5
    max_modified_len: int = 60
    insert_continue: float = 0.5

    def __post_init__(self):
        probs = (self.p_keep, self.p_delete, self.p_insert)
        if min(probs) < 0 or abs(sum(probs) - 1.0) > 1e-12:
            raise ValueError(f"operation probabilities must be nonnegative and sum to 1, got {probs}")
        if not 0.0 <= self.p_mask <= 1.0:
            raise ValueError("p_mask must lie in [0, 1]")
        if min(self.max_raw_len, self.max_insert_run, self.max_modified_len) <= 0:
            raise ValueError("length limits must be positive")


@dataclass
class CorruptionExample:
    raw: list[int]
    corrupted: list[int]
    labels: list[Op]
    insert_targets: dict[int, list[int]]
    # per raw position: the action as first drawn, and as applied
    sampled_actions: list[Op] = field(default_factory=list)
    actions: list[Op] = field(default_factory=list)
    raw_start: int = 0

    def to_json(self) -> dict:
        return {
            "raw": self.raw,
            "corrupted": self.corrupted,
            "labels": [int(x) for x in self.labels],
            "insert_targets": {str(k): v for k, v in sorted(self.insert_targets.items())},
        }


def _draw(rng: Rng, probs: Sequence[float]) -> Op:
    u = rng.random()
    if u < probs[0]:
        return Op.KEEP
    if u < probs[0] + probs[1]:
        return Op.DELETE
    return Op.INSERT


def _keep_or_insert(rng: Rng, cfg: CorruptionConfig) -> Op:
    total = cfg.p_keep + cfg.p_insert
    if total == 0.0:
        return Op.KEEP
    return Op.KEEP if rng.random() < cfg.p_keep / total else Op.INSERT


def corrupt(
    raw: Sequence[int],
    cfg: CorruptionConfig,
    rng: Rng,
    noise_items: np.ndarray,
    eos: int,
) -> CorruptionExample:
    """Randomly delete and insert items in ``raw``; record how to undo it.

    Noise insertions precede the position they were drawn for and are
    labelled Delete. A run of deleted originals becomes the insertion target
    of the next surviving original, in reverse order and ``eos``-terminated.
    The last item is never deleted, and a deletion run never grows past
    ``max_insert_run`` (a further Delete draw is redrawn as Keep/Insert), so
    every example is exactly reversible.
    """
    raw = list(raw)
    if len(raw) < 2:
        raise ValueError(f"corrupt() needs a sequence of length >= 2, got {len(raw)}")
    probs = (cfg.p_keep, cfg.p_delete, cfg.p_insert)
    corrupted: list[int] = []
    labels: list[Op] = []
    targets: dict[int, list[int]] = {}
    sampled, applied = [], []
    origin: list[int] = []  # raw index each S^m position accounts up to
    pending: list[int] = []
    for t, item in enumerate(raw):
        action = _draw(rng, probs)
        sampled.append(action)
        last = t == len(raw) - 1
        if action == Op.DELETE and (last or len(pending) >= cfg.max_insert_run):
            action = _keep_or_insert(rng, cfg)
        applied.append(action)
        if action == Op.DELETE:
            pending.append(item)
            continue
        if action == Op.INSERT:
            run = 1
            while run < cfg.max_insert_run and rng.random() < cfg.insert_continue:
                run += 1
            for noise in rng.choice(noise_items, size=run):
                corrupted.append(int(noise))
                labels.append(Op.DELETE)
                origin.append(t - len(pending))
        if pending:
            targets[len(corrupted)] = pending[::-1] + [eos]
            labels.append(Op.INSERT)
        else:
            labels.append(Op.KEEP)
        corrupted.append(item)
        origin.append(t - len(pending))
        pending = []

    raw_start = 0
    overflow = len(corrupted) - cfg.max_modified_len
    if overflow > 0:
        raw_start = origin[overflow]
        corrupted = corrupted[overflow:]
        labels = labels[overflow:]
        targets = {p - overflow: v for p, v in targets.items() if p >= overflow}
    return CorruptionExample(raw, corrupted, labels, targets, sampled, applied, raw_start)


def reconstruct(example: CorruptionExample, eos: int) -> list[int]:
    """Undo a corruption from its labels and insertion targets."""
    out: list[int] = []
    for pos, (item, label) in enumerate(zip(example.corrupted, example.labels)):
        if label == Op.DELETE:
            continue
        if label == Op.INSERT:
            tgt = example.insert_targets[pos]
            assert tgt[-1] == eos
            out.extend(reversed(tgt[:-1]))
        out.append(item)
    return out


def mask_for_recommender(
    seq: Sequence[int], p_mask: float, rng: Rng, mask_id: int, policy: str = "random"
) -> tuple[list[int], list[int], list[int]]:
    """Returns (masked sequence, masked positions, original items there).

    ``policy="random"`` masks each position with probability ``p_mask`` and
    forces one mask if none was drawn; ``policy="last"`` masks only the final
    position (unidirectional recommender training).
    """
    seq = list(seq)
    if not seq:
        raise ValueError("cannot mask an empty sequence")
    if policy == "last":
        positions = [len(seq) - 1]
    elif policy == "random":
        draws = rng.random(len(seq))
        positions = [i for i in range(len(seq)) if draws[i] < p_mask]
        if not positions:
            positions = [int(rng.integers(0, len(seq)))]
    else:
        raise ValueError(f"unknown masking policy {policy!r}")
    masked = list(seq)
    for p in positions:
        masked[p] = mask_id
    return masked, positions, [seq[p] for p in positions]


def append_eval_mask(seq: Sequence[int], mask_id: int) -> list[int]:
    if len(seq) < 1:
        raise ValueError("cannot append a mask to an empty sequence")
    return list(seq) + [mask_id]
