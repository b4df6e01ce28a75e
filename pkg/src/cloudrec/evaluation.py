"""Ranking metrics, privacy (confusion) statistics and the noise-robustness protocol."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .autodiff import Rng
from .corruption import CorruptionConfig, Op, corrupt
from .data import InteractionSequence, ItemVocabulary, NeighborIndex, jaccard, uninteracted
from .modifier import ModifiedSequence
from .recommender import RankingResult

KS = (5, 10, 20)
STAGE_SIMULATE = 21


class EvaluationError(ValueError):
    pass


def hr_mrr(results: Sequence[RankingResult] | Sequence[int], k: int) -> tuple[float, float]:
    """HR@k and MRR@k from ranking results (or bare 1-based ranks)."""
    if len(results) == 0:
        raise EvaluationError("no ranking results to score")
    ranks = np.array([r.rank if isinstance(r, RankingResult) else int(r) for r in results])
    if ranks.min() < 1:
        raise EvaluationError("ranks are 1-based")
    hit = ranks <= k
    return float(hit.mean()), float(np.where(hit, 1.0 / ranks, 0.0).mean())


def metric_block(results) -> dict[str, float]:
    out = {}
    for k in KS:
        out[f"HR@{k}"], out[f"MRR@{k}"] = hr_mrr(results, k)
    out["Sum"] = sum(out[f"HR@{k}"] + out[f"MRR@{k}"] for k in KS)
    return out


@dataclass
class MetricsReport:
    metrics: dict[str, float] = field(default_factory=dict)
    privacy: dict[str, float] | None = None
    robustness: dict[str, float] | None = None
    metadata: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {k: v for k, v in dataclasses.asdict(self).items() if v is not None}

    def to_text(self) -> str:
        lines = []
        for section in ("metrics", "privacy", "robustness"):
            block = getattr(self, section)
            if not block:
                continue
            lines.append(f"[{section}]")
            width = max(len(k) for k in block)
            for key, val in block.items():
                lines.append(f"  {key:<{width}}  {val:>10.4f}" if isinstance(val, float) else f"  {key:<{width}}  {val}")
        if self.metadata:
            lines.append("[metadata]")
            for key, val in sorted(self.metadata.items()):
                lines.append(f"  {key}: {json.dumps(val, sort_keys=True)}")
        return "\n".join(lines) + "\n"

    def write(self, path: str | Path) -> None:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), sort_keys=True, indent=1) + "\n", encoding="utf-8")
        path.with_suffix(".txt").write_text(self.to_text(), encoding="utf-8")


# ---------------------------------------------------------------- ranking


def candidates_for(seq: InteractionSequence, vocab: ItemVocabulary, stage: str) -> list[int]:
    negs = seq.negatives(stage)
    return uninteracted(seq, vocab) if negs is None else list(negs)


def modify_histories(model, histories: Sequence[list[int]], neighbor_lists, batch_size: int = 128) -> list[ModifiedSequence]:
    out = []
    for start in range(0, len(histories), batch_size):
        out.extend(model.modifier.modify(histories[start:start + batch_size], neighbor_lists[start:start + batch_size]))
    return out


def rank_all(model, histories: Sequence[list[int]], sequences: Sequence[InteractionSequence],
             vocab: ItemVocabulary, stage: str, batch_size: int = 128) -> list[RankingResult]:
    results = []
    for start in range(0, len(histories), batch_size):
        scores = model.recommender.next_item_scores(histories[start:start + batch_size])
        for row, seq in zip(scores, sequences[start:start + batch_size]):
            cands = [seq.target(stage)] + candidates_for(seq, vocab, stage)
            results.append(RankingResult.from_scores(cands, row[np.asarray(cands) - 1]))
    return results


def evaluate(model, sequences: Sequence[InteractionSequence], index: NeighborIndex, vocab: ItemVocabulary,
             stage: str = "test", route: str = "modified", histories: Sequence[list[int]] | None = None):
    """Rank each user's ``stage`` item. ``route="modified"`` feeds the
    recommender the modifier's output, ``"raw"`` the untouched history.

    Returns (metrics block, modified sequences or None, input histories).
    """
    if route not in ("modified", "raw"):
        raise ValueError(f"route must be 'modified' or 'raw', got {route!r}")
    if histories is None:
        histories = [s.history(stage) for s in sequences]
    modified = None
    inputs = list(histories)
    if route == "modified":
        nbrs = [[sequences[j].train_items for j in index.ids(i)] for i in range(len(sequences))]
        modified = modify_histories(model, inputs, nbrs)
        inputs = [m.items for m in modified]
    results = rank_all(model, inputs, sequences, vocab, stage)
    return metric_block(results), modified, histories


def validation_hr10(model, sequences, index, vocab) -> float:
    return evaluate(model, sequences, index, vocab, stage="valid")[0]["HR@10"]


# ---------------------------------------------------------------- privacy


def privacy_report(raw: Sequence[Sequence[int]], modified: Sequence[ModifiedSequence]) -> dict[str, float]:
    """Keep/Delete/Insert proportions and mean raw-vs-modified Jaccard.

    ``keep/delete/insert`` count one decision per original position (an
    insertion run is one Insert at its anchor); the ``*_items`` variants
    count every inserted item as its own Insert.
    """
    if len(raw) != len(modified):
        raise EvaluationError(f"misaligned inputs: {len(raw)} raw vs {len(modified)} modified")
    counts = np.zeros(3)
    inserted_items = 0
    sims = []
    for r, m in zip(raw, modified):
        if len(m.operations) != len(r):
            raise EvaluationError("decode log does not align with its raw sequence")
        for op in m.operations:
            counts[int(op)] += 1
        inserted_items += sum(len(v) for v in m.insertions.values())
        sims.append(jaccard(set(r), set(m.items)))
    total = counts.sum()
    if total == 0:
        raise EvaluationError("no decode decisions to report")
    kept = counts[Op.KEEP] + counts[Op.INSERT]  # anchors of insertions are kept
    item_total = kept + counts[Op.DELETE] + inserted_items
    return {
        "similarity": float(np.mean(sims)),
        "keep": float(counts[Op.KEEP] / total),
        "delete": float(counts[Op.DELETE] / total),
        "insert": float(counts[Op.INSERT] / total),
        "keep_items": float(kept / item_total),
        "delete_items": float(counts[Op.DELETE] / item_total),
        "insert_items": float(inserted_items / item_total),
    }


# ---------------------------------------------------------------- robustness


def simulate_noise(sequences: Sequence[InteractionSequence], vocab: ItemVocabulary, seed: int,
                   probs: tuple[float, float, float] = (0.4, 0.3, 0.3),
                   base: CorruptionConfig = CorruptionConfig()) -> tuple[list[InteractionSequence], list]:
    """Randomly keep/delete/insert every history item; valid/test items untouched.

    Returns (simulated sequences, per-sequence corruption examples).
    """
    cfg = dataclasses.replace(base, p_keep=probs[0], p_delete=probs[1], p_insert=probs[2])
    out, examples = [], []
    for sid, seq in enumerate(sequences):
        history = seq.items[:-2]
        if len(history) >= 2:
            ex = corrupt(history, cfg, Rng.derive(seed, STAGE_SIMULATE, sid), vocab.item_ids, vocab.eos)
            history = ex.corrupted
        else:
            ex = None
        examples.append(ex)
        out.append(dataclasses.replace(seq, items=list(history) + seq.items[-2:]))
    return out, examples


def robustness_report(model, real: Sequence[InteractionSequence], simulated: Sequence[InteractionSequence],
                      index: NeighborIndex, vocab: ItemVocabulary, route: str = "modified") -> dict[str, float]:
    """Sum on the simulated set vs Sum_real on the real set, same route for both.

    ``Sum_real_raw`` / ``dist_vs_raw`` additionally compare against the real
    set fed without modification.
    """
    sim = evaluate(model, simulated, index, vocab, "test", route)[0]["Sum"]
    real_sum = evaluate(model, real, index, vocab, "test", route)[0]["Sum"]
    raw_sum = real_sum if route == "raw" else evaluate(model, real, index, vocab, "test", "raw")[0]["Sum"]
    return {
        "Sum": sim,
        "Sum_real": real_sum,
        "dist": dist(sim, real_sum),
        "Sum_real_raw": raw_sum,
        "dist_vs_raw": dist(sim, raw_sum),
    }


def dist(total: float, total_real: float) -> float:
    """Relative change of ``total`` against ``total_real``."""
    if total == total_real:
        return 0.0
    if total_real == 0:
        return float("inf") if total > 0 else float("-inf")
    return (total - total_real) / total_real
