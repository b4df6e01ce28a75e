"""Interaction-log ingestion, leave-one-out splits and the Jaccard neighbor index."""

from __future__ import annotations

import hashlib
import json
import logging
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .autodiff import Rng

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
MIN_RECORDS = 5
MAX_NEIGHBORS = 10
MIN_SIMILARITY = 0.1

Event = tuple[str, str, int]


class CorpusError(ValueError):
    pass


class FormatVersionError(ValueError):
    pass


@dataclass
class ItemVocabulary:
    """Dense ids: 0 is padding, 1..n are real items, then [mask] and [eos]."""

    raw_keys: list[str]

    PAD = 0

    def __post_init__(self):
        self._index = {k: i + 1 for i, k in enumerate(self.raw_keys)}
        if len(self._index) != len(self.raw_keys):
            raise CorpusError("duplicate raw item keys in vocabulary")

    @property
    def n_items(self) -> int:
        return len(self.raw_keys)

    @property
    def mask(self) -> int:
        return self.n_items + 1

    @property
    def eos(self) -> int:
        return self.n_items + 2

    @property
    def size(self) -> int:
        return self.n_items + 3

    @property
    def item_ids(self) -> np.ndarray:
        return np.arange(1, self.n_items + 1)

    def id_of(self, raw_key: str) -> int:
        return self._index[raw_key]

    def key_of(self, item_id: int) -> str:
        if not 1 <= item_id <= self.n_items:
            raise KeyError(f"{item_id} is not a real item id")
        return self.raw_keys[item_id - 1]

    def to_json(self) -> dict:
        return {"format_version": FORMAT_VERSION, "items": self.raw_keys, "pad": 0}

    @classmethod
    def from_json(cls, obj: dict) -> "ItemVocabulary":
        check_version(obj, "vocabulary")
        return cls(list(obj["items"]))


@dataclass
class InteractionSequence:
    user: str
    items: list[int]
    max_train_len: int = 50
    valid_negatives: list[int] | None = None
    test_negatives: list[int] | None = None

    @property
    def test_item(self) -> int:
        return self.items[-1]

    @property
    def valid_item(self) -> int:
        return self.items[-2]

    @property
    def train_items(self) -> list[int]:
        return self.items[:-2][-self.max_train_len:]

    def history(self, stage: str) -> list[int]:
        """Input sequence used to predict the ``valid`` or ``test`` item."""
        if stage == "valid":
            return self.train_items
        if stage == "test":
            return self.items[:-1][-self.max_train_len:]
        raise ValueError(f"unknown stage {stage!r}")

    def target(self, stage: str) -> int:
        return self.valid_item if stage == "valid" else self.test_item

    def negatives(self, stage: str) -> list[int] | None:
        return self.valid_negatives if stage == "valid" else self.test_negatives


@dataclass
class NeighborIndex:
    neighbors: list[list[tuple[int, float]]] = field(default_factory=list)

    def __getitem__(self, seq_id: int) -> list[tuple[int, float]]:
        return self.neighbors[seq_id]

    def __len__(self) -> int:
        return len(self.neighbors)

    def ids(self, seq_id: int) -> list[int]:
        return [j for j, _ in self.neighbors[seq_id]]


def check_version(obj: dict, what: str) -> None:
    v = obj.get("format_version")
    if v != FORMAT_VERSION:
        raise FormatVersionError(f"{what}: format_version {v!r}, expected {FORMAT_VERSION}")


# ---------------------------------------------------------------- filtering & sequences


def date_range_filter(events: Iterable[Event], start: int | None, end: int | None) -> list[Event]:
    """Keep events with start <= time < end; applied before 5-core filtering."""
    return [e for e in events if (start is None or e[2] >= start) and (end is None or e[2] < end)]


def five_core_filter(events: Sequence[Event], min_records: int = MIN_RECORDS) -> list[Event]:
    events = list(events)
    while True:
        users = Counter(e[0] for e in events)
        items = Counter(e[1] for e in events)
        kept = [e for e in events if users[e[0]] >= min_records and items[e[1]] >= min_records]
        if len(kept) == len(events):
            break
        events = kept
    if not events:
        raise CorpusError("corpus vanished under filtering")
    return events


def build_sequences(
    events: Sequence[Event], max_train_len: int = 50
) -> tuple[list[InteractionSequence], ItemVocabulary]:
    """Per-user chronological sequences; equal timestamps keep input order."""
    vocab = ItemVocabulary(sorted({e[1] for e in events}))
    per_user: dict[str, list[tuple[int, int, str]]] = defaultdict(list)
    for order, (user, item, t) in enumerate(events):
        per_user[user].append((int(t), order, item))
    sequences = []
    dropped = 0
    for user in sorted(per_user):
        recs = sorted(per_user[user])
        if len(recs) < 3:
            dropped += 1
            continue
        sequences.append(
            InteractionSequence(user, [vocab.id_of(r[2]) for r in recs], max_train_len=max_train_len)
        )
    if dropped:
        log.warning("dropped %d users with fewer than 3 interactions", dropped)
    return sequences, vocab


# ---------------------------------------------------------------- similarity


def jaccard(a: set, b: set) -> float:
    union = len(a | b)
    return len(a & b) / union if union else 0.0


def _top_neighbors(scored: list[tuple[int, float]], k: int, threshold: float) -> list[tuple[int, float]]:
    kept = [(j, s) for j, s in scored if s > threshold]
    kept.sort(key=lambda js: (-js[1], js[0]))
    return kept[:k]


def build_neighbor_index(
    sequences: Sequence[InteractionSequence],
    k: int = MAX_NEIGHBORS,
    threshold: float = MIN_SIMILARITY,
) -> NeighborIndex:
    """Top-k Jaccard neighbors over train items, via an inverted item index."""
    sets = [set(s.train_items) for s in sequences]
    postings: dict[int, list[int]] = defaultdict(list)
    for sid, items in enumerate(sets):
        for it in items:
            postings[it].append(sid)
    result = []
    for sid, items in enumerate(sets):
        overlap: Counter = Counter()
        for it in items:
            overlap.update(postings[it])
        overlap.pop(sid, None)
        scored = [
            (j, inter / (len(items) + len(sets[j]) - inter)) for j, inter in overlap.items()
        ]
        result.append(_top_neighbors(scored, k, threshold))
    return NeighborIndex(result)


def brute_force_neighbor_index(sequences, k: int = MAX_NEIGHBORS, threshold: float = MIN_SIMILARITY) -> NeighborIndex:
    sets = [set(s.train_items) for s in sequences]
    out = []
    for i, a in enumerate(sets):
        scored = [(j, jaccard(a, b)) for j, b in enumerate(sets) if j != i]
        out.append(_top_neighbors(scored, k, threshold))
    return NeighborIndex(out)


# ---------------------------------------------------------------- negatives


def sample_negatives(
    sequences: Sequence[InteractionSequence], vocab: ItemVocabulary, n_negatives: int | None, seed: int
) -> None:
    """Freeze evaluation candidates per (user, stage).

    ``None`` means "all un-interacted items" and is resolved at evaluation
    time. When fewer than ``n_negatives`` un-interacted items exist, all of
    them are used.
    """
    all_items = vocab.item_ids
    for sid, seq in enumerate(sequences):
        if n_negatives is None:
            seq.valid_negatives = seq.test_negatives = None
            continue
        pool = np.setdiff1d(all_items, np.asarray(seq.items))
        for stage_code, attr in ((1, "valid_negatives"), (2, "test_negatives")):
            rng = Rng.derive(seed, 0x4E47, stage_code, sid)
            n = min(n_negatives, pool.size)
            chosen = rng.choice(pool, size=n, replace=False) if n else np.array([], dtype=int)
            setattr(seq, attr, sorted(int(x) for x in chosen))


def uninteracted(seq: InteractionSequence, vocab: ItemVocabulary) -> list[int]:
    return [int(x) for x in np.setdiff1d(vocab.item_ids, np.asarray(seq.items))]


# ---------------------------------------------------------------- synthetic corpus


def generate_synthetic_corpus(
    n_users: int,
    n_items: int,
    markov_order: int = 1,
    rng: Rng | None = None,
    n_clusters: int = 2,
    min_len: int = 5,
    max_len: int = 15,
) -> list[Event]:
    """Seeded first-order Markov logs with planted user/item clusters.

    Each cluster owns a contiguous block of items; a user's chain stays in
    its cluster's block with high probability, so users of a cluster share
    many items. Within a block every item has a few favoured successors.
    Lengths default to 5..15 (mean 10), the sparsity of public
    sequential-recommendation benchmarks.
    """
    if n_items < 20:
        raise ValueError("n_items must be at least 20")
    if markov_order != 1:
        raise ValueError("only first-order chains are supported")
    rng = rng or Rng(0)
    blocks = np.array_split(np.arange(n_items), n_clusters)
    trans = np.full((n_items, n_items), 0.02 / n_items)
    for block in blocks:
        for i in block:
            trans[i, block] += 0.18 / block.size
            succ = rng.choice(block, size=min(3, block.size), replace=False)
            trans[i, succ] += np.array([0.45, 0.25, 0.10])[: succ.size]
    trans /= trans.sum(axis=1, keepdims=True)
    cdf = np.cumsum(trans, axis=1)

    events: list[Event] = []
    for u in range(n_users):
        block = blocks[u % n_clusters]
        length = int(rng.integers(min_len, max_len + 1))
        cur = int(rng.choice(block))
        t0 = int(rng.integers(0, 10_000))
        for step in range(length):
            events.append((f"u{u:04d}", f"i{cur:04d}", t0 + step))
            cur = min(int(np.searchsorted(cdf[cur], rng.random(), side="right")), n_items - 1)
    order = rng.permutation(len(events))
    return [events[i] for i in order]


# ---------------------------------------------------------------- files


def read_events_tsv(path: str | Path) -> list[Event]:
    events = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise CorpusError(f"{path}:{lineno}: expected 3 tab-separated columns")
            events.append((parts[0], parts[1], int(parts[2])))
    return events


def write_events_tsv(events: Iterable[Event], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for u, i, t in events:
            fh.write(f"{u}\t{i}\t{t}\n")


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def content_hash(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def git_blob_hash(body: bytes) -> str:
    return hashlib.sha1(b"blob %d\0" % len(body) + body).hexdigest()


def _write_jsonl(path, kind: str, records: Iterable[dict], meta: dict | None) -> None:
    body = "".join(_dumps(r) + "\n" for r in records)
    header = {"format_version": FORMAT_VERSION, "kind": kind, **(meta or {}),
              "content_version": git_blob_hash(body.encode("utf-8"))}
    Path(path).write_text(_dumps(header) + "\n" + body, encoding="utf-8")


def write_sequences(sequences, path, meta: dict | None = None) -> None:
    def records():
        for s in sequences:
            rec = {"user": s.user, "items": s.items}
            if s.valid_negatives is not None:
                rec["valid_negatives"] = s.valid_negatives
                rec["test_negatives"] = s.test_negatives
            yield rec

    _write_jsonl(path, "sequences", records(), meta)


def read_jsonl(path, kind: str) -> tuple[dict, list[dict]]:
    with open(path, encoding="utf-8") as fh:
        lines = [json.loads(line) for line in fh if line.strip()]
    if not lines:
        raise FormatVersionError(f"{path}: empty file")
    header = lines[0]
    check_version(header, str(path))
    if header.get("kind") != kind:
        raise FormatVersionError(f"{path}: expected kind {kind!r}, got {header.get('kind')!r}")
    return header, lines[1:]


def read_sequences(path, max_train_len: int = 50) -> list[InteractionSequence]:
    _, recs = read_jsonl(path, "sequences")
    return [
        InteractionSequence(
            r["user"],
            list(r["items"]),
            max_train_len=max_train_len,
            valid_negatives=r.get("valid_negatives"),
            test_negatives=r.get("test_negatives"),
        )
        for r in recs
    ]


def write_vocab(vocab: ItemVocabulary, path, meta: dict | None = None) -> None:
    obj = vocab.to_json()
    obj.update(meta or {}, content_version=git_blob_hash(_dumps(obj["items"]).encode("utf-8")))
    Path(path).write_text(_dumps(obj) + "\n", encoding="utf-8")


def read_vocab(path) -> ItemVocabulary:
    return ItemVocabulary.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


def write_neighbors(index: NeighborIndex, path, meta: dict | None = None) -> None:
    _write_jsonl(
        path,
        "neighbors",
        ({"seq": sid, "neighbors": [[j, sc] for j, sc in nbrs]} for sid, nbrs in enumerate(index.neighbors)),
        meta,
    )


def read_neighbors(path) -> NeighborIndex:
    _, recs = read_jsonl(path, "neighbors")
    recs.sort(key=lambda r: r["seq"])
    return NeighborIndex([[(int(j), float(s)) for j, s in r["neighbors"]] for r in recs])
