import numpy as np
import pytest
from collections import Counter
from hypothesis import given, settings
from hypothesis import strategies as st

from cloudrec import data
from cloudrec.autodiff import Rng
from cloudrec.data import InteractionSequence


def naive_five_core(events, k=5):
    """Oracle: remove one offending user or item per pass until stable."""
    events = list(events)
    while True:
        users = Counter(e[0] for e in events)
        items = Counter(e[1] for e in events)
        bad_user = next((u for u, c in users.items() if c < k), None)
        if bad_user is not None:
            events = [e for e in events if e[0] != bad_user]
            continue
        bad_item = next((i for i, c in items.items() if c < k), None)
        if bad_item is None:
            return events
        events = [e for e in events if e[1] != bad_item]


events_strategy = st.lists(
    st.tuples(st.sampled_from([f"u{i}" for i in range(8)]), st.sampled_from([f"i{i}" for i in range(8)]),
              st.integers(0, 50)),
    min_size=0, max_size=150,
)


@settings(max_examples=100, deadline=None)
@given(events_strategy)
def test_five_core_matches_oracle(events):
    expected = naive_five_core(events)
    if not expected:
        with pytest.raises(data.CorpusError):
            data.five_core_filter(events)
        return
    got = data.five_core_filter(events)
    assert got == expected
    users, items = Counter(e[0] for e in got), Counter(e[1] for e in got)
    assert min(users.values()) >= 5 and min(items.values()) >= 5


def test_five_core_cascade():
    # u2 has 4 events; removing u2 drops item b below 5, which drops u1's b records
    ev = [("u1", "a", t) for t in range(5)] + [("u1", "b", 9)] + [("u2", "b", t) for t in range(4)]
    got = data.five_core_filter(ev)
    assert got == [("u1", "a", t) for t in range(5)]


def test_build_sequences_stable_chronological():
    ev = [("u", "x", 5), ("u", "y", 1), ("u", "z", 5), ("u", "w", 0), ("v", "x", 1), ("v", "y", 2)]
    seqs, vocab = data.build_sequences(ev)
    assert [s.user for s in seqs] == ["u"]  # v has < 3 items
    assert [vocab.key_of(i) for i in seqs[0].items] == ["w", "y", "x", "z"]


def test_vocabulary_layout():
    vocab = data.ItemVocabulary(["a", "b", "c"])
    assert vocab.n_items == 3 and vocab.mask == 4 and vocab.eos == 5 and vocab.size == 6
    assert list(vocab.item_ids) == [1, 2, 3]


def test_leave_one_out_split():
    s = InteractionSequence("u", list(range(1, 60)))
    assert s.test_item == 59 and s.valid_item == 58
    assert s.train_items == list(range(8, 58))
    assert s.history("test") == list(range(9, 59))
    assert s.history("valid") == s.train_items


def test_date_filter_half_open():
    ev = [("u", "a", 1), ("u", "a", 5), ("u", "a", 9)]
    assert data.date_range_filter(ev, 5, 9) == [("u", "a", 5)]
    assert data.date_range_filter(ev, None, None) == ev


def _random_corpus(seed, n=30, n_items=15):
    r = np.random.default_rng(seed)
    return [InteractionSequence(f"u{i}", list(r.integers(1, n_items + 1, size=r.integers(4, 12)))) for i in range(n)]


@pytest.mark.parametrize("seed", range(5))
def test_inverted_index_matches_brute_force(seed):
    seqs = _random_corpus(seed)
    assert data.build_neighbor_index(seqs).neighbors == data.brute_force_neighbor_index(seqs).neighbors


def test_neighbor_rules():
    seqs = _random_corpus(11, n=30, n_items=8)
    index = data.build_neighbor_index(seqs)
    for i, nbrs in enumerate(index.neighbors):
        assert len(nbrs) <= 10
        assert all(j != i and s > 0.1 for j, s in nbrs)
        assert nbrs == sorted(nbrs, key=lambda js: (-js[1], js[0]))


@settings(max_examples=100, deadline=None)
@given(st.sets(st.integers(0, 20)), st.sets(st.integers(0, 20)))
def test_jaccard_properties(a, b):
    j = data.jaccard(a, b)
    assert 0.0 <= j <= 1.0
    assert j == data.jaccard(b, a)
    if a and a == b:
        assert j == 1.0


def test_negatives_exclude_interacted_and_cap():
    seqs = [InteractionSequence("u", [1, 2, 3, 4]), InteractionSequence("v", [2, 5, 6])]
    vocab = data.ItemVocabulary([f"i{i}" for i in range(8)])
    data.sample_negatives(seqs, vocab, 99, seed=0)
    for s in seqs:
        for stage in ("valid", "test"):
            negs = s.negatives(stage)
            assert set(negs) == set(range(1, 9)) - set(s.items)  # fewer than 99 available
    data.sample_negatives(seqs, vocab, 2, seed=0)
    assert len(seqs[0].test_negatives) == 2 and not set(seqs[0].test_negatives) & set(seqs[0].items)
    data.sample_negatives(seqs, vocab, None, seed=0)
    assert seqs[0].test_negatives is None


def test_synthetic_corpus_is_deterministic_and_clustered(synthetic_corpus):
    a = data.generate_synthetic_corpus(50, 40, rng=Rng(5))
    b = data.generate_synthetic_corpus(50, 40, rng=Rng(5))
    assert a == b
    seqs, vocab, index = synthetic_corpus
    assert vocab.n_items == 50 and len(seqs) == 200
    # same-cluster users (u%2 equal) dominate each neighbor list
    same = total = 0
    for i, s in enumerate(seqs):
        for j in index.ids(i):
            same += int(s.user[1:]) % 2 == int(seqs[j].user[1:]) % 2
            total += 1
    assert total > 0 and same / total > 0.9


def test_file_round_trip_and_version_check(tmp_path, small_corpus):
    seqs, vocab, index = small_corpus
    data.write_sequences(seqs, tmp_path / "s.jsonl", {"config_hash": "abc"})
    data.write_vocab(vocab, tmp_path / "v.json")
    data.write_neighbors(index, tmp_path / "n.jsonl")
    back = data.read_sequences(tmp_path / "s.jsonl")
    assert [(s.user, s.items, s.test_negatives) for s in back] == [(s.user, s.items, s.test_negatives) for s in seqs]
    assert data.read_vocab(tmp_path / "v.json").raw_keys == vocab.raw_keys
    assert data.read_neighbors(tmp_path / "n.jsonl").neighbors == index.neighbors
    header, _ = data.read_jsonl(tmp_path / "s.jsonl", "sequences")
    body = (tmp_path / "s.jsonl").read_bytes().split(b"\n", 1)[1]
    assert header["content_version"] == data.git_blob_hash(body)
    text = (tmp_path / "s.jsonl").read_text().replace('"format_version":1', '"format_version":99', 1)
    (tmp_path / "bad.jsonl").write_text(text)
    with pytest.raises(data.FormatVersionError):
        data.read_sequences(tmp_path / "bad.jsonl")
    with pytest.raises(data.FormatVersionError):
        data.read_jsonl(tmp_path / "n.jsonl", "sequences")


def test_events_tsv_round_trip(tmp_path):
    ev = [("u1", "a", 3), ("u2", "b", 4)]
    data.write_events_tsv(ev, tmp_path / "e.tsv")
    assert data.read_events_tsv(tmp_path / "e.tsv") == ev
    (tmp_path / "bad.tsv").write_text("u1\ta\n")
    with pytest.raises(data.CorpusError, match="bad.tsv:1"):
        data.read_events_tsv(tmp_path / "bad.tsv")


def test_identical_pair_and_strict_threshold():
    pair = [InteractionSequence("a", [1, 2, 3, 9, 9]), InteractionSequence("b", [1, 2, 3, 8, 8])]
    assert data.build_neighbor_index(pair).neighbors == [[(1, 1.0)], [(0, 1.0)]]
    # train sets {1,2,3,4,5,6,7,8,9} and {9, 10}: Jaccard exactly 0.1 is not > 0.1
    edge = [InteractionSequence("a", list(range(1, 10)) + [0, 0]), InteractionSequence("b", [9, 10, 0, 0])]
    assert data.jaccard(set(edge[0].train_items), set(edge[1].train_items)) == 0.1
    assert data.build_neighbor_index(edge).neighbors == [[], []]


def test_within_cluster_jaccard_exceeds_cross_cluster(synthetic_corpus):
    seqs, _, _ = synthetic_corpus
    sets = [set(s.train_items) for s in seqs]
    cluster = [int(s.user[1:]) % 2 for s in seqs]
    within, cross = [], []
    for i in range(len(seqs)):
        for j in range(i + 1, len(seqs)):
            (within if cluster[i] == cluster[j] else cross).append(data.jaccard(sets[i], sets[j]))
    assert np.mean(within) > np.mean(cross)


def test_serialization_is_byte_identical(tmp_path, small_corpus):
    seqs, vocab, index = small_corpus
    for name in ("a", "b"):
        data.write_sequences(seqs, tmp_path / f"{name}.jsonl", {"config_hash": "x"})
        data.write_neighbors(index, tmp_path / f"n{name}.jsonl")
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    assert (tmp_path / "na.jsonl").read_bytes() == (tmp_path / "nb.jsonl").read_bytes()
