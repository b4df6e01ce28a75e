"""Train CLOUD / Variant-1 / STEAM on the synthetic corpus over several seeds
and compare Insert proportions and raw-vs-modified similarity."""

from __future__ import annotations

import argparse
import json
import time

from cloudrec import data, evaluation
from cloudrec.autodiff import Rng
from cloudrec.corruption import CorruptionConfig
from cloudrec.model import CloudModel, ModelConfig
from cloudrec.training import TrainConfig, fit

STAGE_SYNTHETIC = 32


def synthetic_corpus(seed: int = 7, users: int = 200, items: int = 50, min_len: int = 5, max_len: int = 15):
    events = data.generate_synthetic_corpus(users, items, rng=Rng.derive(seed, STAGE_SYNTHETIC),
                                            min_len=min_len, max_len=max_len)
    seqs, vocab = data.build_sequences(data.five_core_filter(events))
    data.sample_negatives(seqs, vocab, 99, seed=seed)
    return seqs, vocab, data.build_neighbor_index(seqs)


def run(mode: str, seed: int, epochs: int, corpus, validate: bool = True) -> dict:
    """Train one mode; with ``validate`` the best validation-HR@10 epoch is kept."""
    seqs, vocab, index = corpus
    model = CloudModel(vocab.n_items, ModelConfig(mode=mode), seed=seed)
    tcfg = TrainConfig(epochs=epochs, seed=seed, select_best=validate)
    t0 = time.perf_counter()
    hist = fit(model, seqs, index, CorruptionConfig(), tcfg,
               validate=(lambda m: evaluation.validation_hr10(m, seqs, index, vocab)) if validate else None)
    metrics, modified, histories = evaluation.evaluate(model, seqs, index, vocab, "test", "modified")
    return {
        "mode": mode,
        "seed": seed,
        "seconds": time.perf_counter() - t0,
        "loss": [e.total for e in hist.epochs],
        "metrics": metrics,
        "privacy": evaluation.privacy_report(histories, modified),
    }


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--modes", nargs="+", default=["cloud", "variant1", "steam"])
    ap.add_argument("--epochs", type=int, default=20)
    ap.add_argument("--output", default="trend_check.json")
    ap.add_argument("--last-epoch", action="store_true", help="report the final epoch instead of the best one")
    args = ap.parse_args()
    corpus = synthetic_corpus()
    rows = []
    for seed in args.seeds:
        for mode in args.modes:
            row = run(mode, seed, args.epochs, corpus, validate=not args.last_epoch)
            p = row["privacy"]
            print(f"seed {seed} {mode:9s} insert={p['insert']:.4f} delete={p['delete']:.4f} "
                  f"sim={p['similarity']:.4f} Sum={row['metrics']['Sum']:.4f} ({row['seconds']:.0f}s)", flush=True)
            rows.append(row)
    with open(args.output, "w", encoding="utf-8") as fh:
        json.dump(rows, fh, indent=1)


if __name__ == "__main__":
    main()
