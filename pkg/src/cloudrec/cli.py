"""``cloud`` command line: preprocess, index, train, modify, evaluate and robustness runs."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import data, evaluation, training
from .autodiff import Rng
from .config import ConfigError, ExperimentConfig, load_config
from .corruption import corrupt
from .evaluation import MetricsReport
from .model import CloudModel

log = logging.getLogger("cloudrec")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_MISSING = 3
EXIT_VERSION = 4
EXIT_DATA = 5
EXIT_CHECKPOINT = 6
EXIT_NUMERIC = 7

STAGE_NEGATIVES = 31
STAGE_SYNTHETIC = 32
STAGE_SIMULATE = 33


def _paths(cfg: ExperimentConfig) -> dict[str, Path]:
    d = Path(cfg.data_dir)
    return {
        "sequences": d / "sequences.jsonl",
        "vocab": d / "vocab.json",
        "neighbors": d / "neighbors.jsonl",
        "checkpoint": Path(cfg.checkpoint) if cfg.checkpoint else Path(cfg.output_dir) / "checkpoint",
    }


def _meta(cfg: ExperimentConfig) -> dict:
    return {"config_hash": cfg.hash()}


def _require(*paths: Path) -> None:
    for p in paths:
        if not p.exists():
            raise FileNotFoundError(f"required file not found: {p}")


def _load_data(cfg, need_index: bool = True):
    p = _paths(cfg)
    _require(p["sequences"], p["vocab"], *( [p["neighbors"]] if need_index else []))
    seqs = data.read_sequences(p["sequences"], cfg.max_raw_len)
    vocab = data.read_vocab(p["vocab"])
    index = data.read_neighbors(p["neighbors"]) if need_index else None
    if index is not None and len(index) != len(seqs):
        raise data.CorpusError(f"neighbor index covers {len(index)} sequences, data has {len(seqs)}")
    return seqs, vocab, index


def _write_report(report: MetricsReport, cfg, args, default_name: str) -> None:
    report.metadata.setdefault("config", cfg.to_dict())
    report.metadata.setdefault("config_hash", cfg.hash())
    path = Path(args.report) if args.report else Path(cfg.output_dir) / default_name
    path.parent.mkdir(parents=True, exist_ok=True)
    report.write(path)
    print(report.to_text(), end="")
    log.info("report written to %s", path)


# ---------------------------------------------------------------- subcommands


def cmd_synthesize(cfg, args) -> None:
    events = data.generate_synthetic_corpus(cfg.synthetic_users, cfg.synthetic_items,
                                            rng=Rng.derive(cfg.seed, STAGE_SYNTHETIC),
                                            n_clusters=cfg.synthetic_clusters)
    out = Path(args.output)
    out.parent.mkdir(parents=True, exist_ok=True)
    data.write_events_tsv(events, out)
    print(f"wrote {len(events)} events to {out}")


def cmd_preprocess(cfg, args) -> None:
    if args.synthetic:
        events = data.generate_synthetic_corpus(cfg.synthetic_users, cfg.synthetic_items,
                                                rng=Rng.derive(cfg.seed, STAGE_SYNTHETIC),
                                                n_clusters=cfg.synthetic_clusters)
    else:
        if not cfg.events:
            raise ConfigError("preprocess needs --events PATH or --synthetic")
        _require(Path(cfg.events))
        events = data.read_events_tsv(cfg.events)
    events = data.date_range_filter(events, cfg.date_start, cfg.date_end)
    events = data.five_core_filter(events)
    seqs, vocab = data.build_sequences(events, cfg.max_raw_len)
    data.sample_negatives(seqs, vocab, cfg.negative_count(), Rng.derive(cfg.seed, STAGE_NEGATIVES).integers(0, 2**62))
    p = _paths(cfg)
    p["sequences"].parent.mkdir(parents=True, exist_ok=True)
    data.write_sequences(seqs, p["sequences"], _meta(cfg))
    data.write_vocab(vocab, p["vocab"], _meta(cfg))
    print(f"{len(seqs)} sequences, {vocab.n_items} items -> {p['sequences'].parent}")
    if args.with_index:
        cmd_build_index(cfg, args)


def cmd_build_index(cfg, args) -> None:
    seqs, _, _ = _load_data(cfg, need_index=False)
    index = data.build_neighbor_index(seqs)
    p = _paths(cfg)
    data.write_neighbors(index, p["neighbors"], _meta(cfg))
    covered = sum(1 for n in index.neighbors if n)
    print(f"neighbor index: {covered}/{len(seqs)} sequences have neighbors -> {p['neighbors']}")


def cmd_train(cfg, args) -> None:
    seqs, vocab, index = _load_data(cfg)
    tcfg, ccfg = cfg.training(), cfg.corruption()
    model = CloudModel(vocab.n_items, cfg.model(), seed=cfg.seed)
    if args.dump_corruptions:
        with open(args.dump_corruptions, "w", encoding="utf-8") as fh:
            for sid, s in enumerate(seqs):
                if len(s.train_items) < 2:
                    continue
                ex = corrupt(s.train_items, ccfg, Rng.derive(cfg.seed, training.STAGE_CORRUPT, 1, sid),
                             vocab.item_ids, vocab.eos)
                fh.write(json.dumps({"user": s.user, **ex.to_json()}, sort_keys=True) + "\n")

    def validate(m):
        return evaluation.validation_hr10(m, seqs, index, vocab)

    history = training.fit(
        model, seqs, index, ccfg, tcfg, validate=validate if tcfg.select_best and tcfg.epochs else None,
        on_epoch=lambda e, l: print(f"epoch {e:3d}  L_mod={l.modifier:9.4f}  L_rec={l.recommender:9.4f}  L={l.total:9.4f}"),
    )
    ckpt = _paths(cfg)["checkpoint"]
    training.save_checkpoint(model, ckpt, {"config": cfg.to_dict(), "config_hash": cfg.hash(),
                                           "epoch": history.best_epoch or tcfg.epochs})
    log_path = ckpt / "train_log.json"
    log_path.write_text(json.dumps({
        "epochs": [l.to_dict() for l in history.epochs],
        "valid_hr10": history.valid_hr10,
        "best_epoch": history.best_epoch,
    }, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    print(f"checkpoint -> {ckpt}")


def _load_model(cfg) -> CloudModel:
    ckpt = _paths(cfg)["checkpoint"]
    _require(ckpt / "manifest.json", ckpt / "params.bin")
    model, _ = training.load_checkpoint(ckpt)
    return model


def cmd_modify(cfg, args) -> None:
    model = _load_model(cfg)
    src = Path(args.input) if args.input else _paths(cfg)["sequences"]
    _require(src)
    seqs = data.read_sequences(src, cfg.max_raw_len)
    nb_path = Path(args.neighbors) if args.neighbors else _paths(cfg)["neighbors"]
    if nb_path.exists():
        index = data.read_neighbors(nb_path)
        if len(index) != len(seqs):
            raise data.CorpusError(f"neighbor index covers {len(index)} sequences, input has {len(seqs)}")
        nbrs = [[seqs[j].train_items for j in index.ids(i)] for i in range(len(seqs))]
    else:
        nbrs = [[] for _ in seqs]
    histories = [s.history(args.stage) for s in seqs]
    modified = evaluation.modify_histories(model, histories, nbrs)
    out = Path(args.output)
    out.parent.mkdir(parents=True, exist_ok=True)
    header = {"format_version": data.FORMAT_VERSION, "kind": "modified", **_meta(cfg)}
    with open(out, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for s, m in zip(seqs, modified):
            fh.write(json.dumps({"user": s.user, **m.to_json()}, sort_keys=True) + "\n")
    print(f"modified {len(modified)} sequences -> {out}")


def cmd_evaluate(cfg, args) -> None:
    model = _load_model(cfg)
    seqs, vocab, index = _load_data(cfg)
    metrics, _, _ = evaluation.evaluate(model, seqs, index, vocab, args.stage, args.route)
    report = MetricsReport(metrics, metadata={"mode": model.config.mode, "seed": cfg.seed,
                                              "stage": args.stage, "route": args.route,
                                              "checkpoint": str(_paths(cfg)["checkpoint"])})
    _write_report(report, cfg, args, f"eval_{args.stage}_{args.route}.json")


def cmd_privacy_report(cfg, args) -> None:
    model = _load_model(cfg)
    seqs, vocab, index = _load_data(cfg)
    metrics, modified, histories = evaluation.evaluate(model, seqs, index, vocab, "test", "modified")
    report = MetricsReport(metrics, privacy=evaluation.privacy_report(histories, modified),
                           metadata={"mode": model.config.mode, "seed": cfg.seed})
    _write_report(report, cfg, args, "privacy.json")


def _simulated(cfg, args, seqs, vocab):
    if getattr(args, "simulated", None):
        _require(Path(args.simulated))
        return data.read_sequences(args.simulated, cfg.max_raw_len)
    sim, _ = evaluation.simulate_noise(seqs, vocab, Rng.derive(cfg.seed, STAGE_SIMULATE).integers(0, 2**62),
                                       tuple(args.probs), cfg.corruption())
    return sim


def cmd_simulate_noise(cfg, args) -> None:
    seqs, vocab, _ = _load_data(cfg, need_index=False)
    sim = _simulated(cfg, args, seqs, vocab)
    out = Path(args.output)
    out.parent.mkdir(parents=True, exist_ok=True)
    data.write_sequences(sim, out, {**_meta(cfg), "probs": list(args.probs)})
    print(f"simulated dataset -> {out}")


def cmd_robustness(cfg, args) -> None:
    model = _load_model(cfg)
    seqs, vocab, index = _load_data(cfg)
    sim = _simulated(cfg, args, seqs, vocab)
    block = evaluation.robustness_report(model, seqs, sim, index, vocab, args.route)
    metrics = evaluation.evaluate(model, sim, index, vocab, "test", args.route)[0]
    report = MetricsReport(metrics, robustness=block, metadata={"mode": model.config.mode, "seed": cfg.seed,
                                                                "probs": list(args.probs), "route": args.route})
    _write_report(report, cfg, args, "robustness.json")


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cloud", description=__doc__)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML or JSON experiment config")
    common.add_argument("--seed", type=int)
    common.add_argument("--mode", choices=["cloud", "variant1", "variant2", "steam"])
    common.add_argument("--recommender", choices=["bi", "uni"])
    common.add_argument("--negatives", help="99 | all | N")
    common.add_argument("--report", help="report output path (JSON; a .txt twin is written alongside)")
    common.add_argument("--checkpoint", help="checkpoint directory")
    common.add_argument("--data-dir", dest="data_dir")
    common.add_argument("--output-dir", dest="output_dir")
    common.add_argument("--epochs", type=int)
    common.add_argument("--batch-size", dest="batch_size", type=int)
    common.add_argument("-v", "--verbose", action="store_true")

    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("synthesize", parents=[common], help="write a synthetic interaction TSV")
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_synthesize)

    p = sub.add_parser("preprocess", parents=[common], help="filter, split and vocabulary")
    p.add_argument("--events", help="TSV of user_id, item_id, timestamp")
    p.add_argument("--synthetic", action="store_true", help="use the seeded synthetic corpus")
    p.add_argument("--with-index", action="store_true", help="also build the neighbor index")
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("build-index", parents=[common], help="Jaccard similar-sequence index")
    p.set_defaults(func=cmd_build_index)

    p = sub.add_parser("train", parents=[common], help="joint modifier + recommender training")
    p.add_argument("--dump-corruptions", help="write epoch-1 corruption examples as JSON lines")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("modify", parents=[common], help="edit sequences with a trained modifier")
    p.add_argument("--input", help="sequences JSONL (default: the preprocessed data)")
    p.add_argument("--neighbors", help="neighbor index aligned with --input")
    p.add_argument("--output", required=True)
    p.add_argument("--stage", choices=["valid", "test"], default="test")
    p.set_defaults(func=cmd_modify)

    p = sub.add_parser("evaluate", parents=[common], help="HR/MRR on the valid or test items")
    p.add_argument("--stage", choices=["valid", "test"], default="test")
    p.add_argument("--route", choices=["modified", "raw"], default="modified")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("privacy-report", parents=[common], help="operation proportions and similarity")
    p.set_defaults(func=cmd_privacy_report)

    for name, func in (("simulate-noise", cmd_simulate_noise), ("robustness", cmd_robustness)):
        p = sub.add_parser(name, parents=[common])
        p.add_argument("--probs", type=float, nargs=3, default=[0.4, 0.3, 0.3], metavar=("KEEP", "DELETE", "INSERT"))
        if name == "simulate-noise":
            p.add_argument("--output", required=True)
        else:
            p.add_argument("--simulated", help="pre-generated simulated sequences JSONL")
            p.add_argument("--route", choices=["modified", "raw"], default="modified")
        p.set_defaults(func=func)
    return parser


OVERRIDES = ("seed", "mode", "recommender", "negatives", "checkpoint", "data_dir", "output_dir",
             "epochs", "batch_size", "events")


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config)
        cfg = cfg.replace(**{k: getattr(args, k, None) for k in OVERRIDES})
        args.func(cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"missing file: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (data.FormatVersionError, training.CheckpointError) as exc:
        code = EXIT_CHECKPOINT if isinstance(exc, training.CheckpointIntegrityError) else EXIT_VERSION
        print(f"{'integrity' if code == EXIT_CHECKPOINT else 'version'} error: {exc}", file=sys.stderr)
        return code
    except data.CorpusError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except training.NonFiniteError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
