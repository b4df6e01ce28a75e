"""Acceptance suite: ten criteria at their stated tolerances.

Each ``check_*`` returns a one-line detail string and raises AssertionError on
failure. Under pytest a PASS/FAIL line per criterion is printed in the
terminal summary; ``python tests/test_acceptance.py`` prints the same lines.
"""

from __future__ import annotations

import sys
import tempfile
import time
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))
sys.path.insert(0, str(Path(__file__).parents[1] / "scripts"))

from cloudrec import autodiff as ad  # noqa: E402
from cloudrec import data, evaluation  # noqa: E402
from cloudrec.autodiff import Parameter, Rng, Tensor  # noqa: E402
from cloudrec.corruption import CorruptionConfig, Op, corrupt, reconstruct  # noqa: E402
from cloudrec.data import InteractionSequence  # noqa: E402
from cloudrec.evaluation import hr_mrr  # noqa: E402
from cloudrec.model import CloudModel, ModelConfig  # noqa: E402
from cloudrec.recommender import RankingResult  # noqa: E402
from cloudrec.training import TrainConfig, fit, load_checkpoint, save_checkpoint  # noqa: E402

from conftest import check_grads, tiny_model  # noqa: E402
from trend_check import run as trend_run  # noqa: E402
from trend_check import synthetic_corpus  # noqa: E402

RESULTS: list[tuple[str, bool, str]] = []

N_ITEMS = 12
EOS = N_ITEMS + 2


def record(name: str, fn):
    try:
        detail = fn()
    except AssertionError as exc:
        RESULTS.append((name, False, str(exc).splitlines()[0] if str(exc) else "assertion failed"))
        raise
    RESULTS.append((name, True, detail))


@pytest.fixture(scope="module")
def corpus():
    return synthetic_corpus(seed=7)


# ---------------------------------------------------------------- 1


def _random_examples(seed: int, n: int = 3):
    r = np.random.default_rng(seed)
    out = []
    for i in range(n):
        raw = list(r.integers(1, N_ITEMS + 1, size=r.integers(4, 9)))
        out.append(corrupt(raw, CorruptionConfig(), Rng.derive(seed, i), np.arange(1, N_ITEMS + 1), EOS))
    return out


def check_gradients() -> str:
    t0 = time.perf_counter()
    worst = 0.0
    g = np.random.default_rng(0)

    def P(*shape, low=None):
        data_ = g.uniform(0.5, 2.0, size=shape) if low else g.normal(size=shape)
        return Parameter(data_, name="p")

    x, y, w, b = P(3, 4), P(4,), P(5, 4), P(5,)
    pos = P(3, 4, low=True)
    r = g.normal(size=(3, 5))
    targets = np.array([0, 3, 2])
    prims = [
        (lambda: ad.sum(ad.mul(ad.add(x, y), r[:, :4])), [x, y]),
        (lambda: ad.sum(ad.mul(ad.sub(x, y), x)), [x, y]),
        (lambda: ad.sum(ad.exp(ad.scale(x, 0.3))), [x]),
        (lambda: ad.sum(ad.log(pos)), [pos]),
        (lambda: ad.sum(ad.mul(ad.tanh(x), r[:, :4])), [x]),
        (lambda: ad.sum(ad.mul(ad.relu(x), x)), [x]),
        (lambda: ad.sum(ad.mul(ad.gelu(x), r[:, :4])), [x]),
        (lambda: ad.sum(ad.mul(ad.dropout(x, 0.5, Rng(1), True), x)), [x]),
        (lambda: ad.sum(ad.mul(ad.mean(x, axis=0), y)), [x, y]),
        (lambda: ad.sum(ad.mul(ad.transpose(ad.reshape(x, (2, 6))), ad.reshape(x, (6, 2)))), [x]),
        (lambda: ad.sum(ad.mul(ad.concat([x, x[:, :1]], axis=1), r)), [x]),
        (lambda: ad.sum(ad.tanh(ad.stack([x, ad.scale(x, 2.0)], axis=0))), [x]),
        (lambda: ad.sum(ad.tanh(ad.embedding_lookup(w, np.array([[0, 4, 4], [1, 0, 2]])))), [w]),
        (lambda: ad.sum(ad.tanh(ad.index_select(w, [3, 3, 1], 0))), [w]),
        (lambda: ad.sum(ad.tanh(ad.matmul(x, ad.transpose(w)))), [x, w]),
        (lambda: ad.sum(ad.tanh(ad.linear(x, w, b))), [x, w, b]),
        (lambda: ad.sum(ad.mul(ad.softmax(ad.linear(x, w, b)), r)), [x, w, b]),
        (lambda: ad.sum(ad.mul(ad.log_softmax(ad.linear(x, w, b)), r)), [x, w, b]),
        (lambda: ad.sum(ad.mul(ad.layer_norm(ad.linear(x, w), b, b), r)), [x, w, b]),
        (lambda: ad.cross_entropy(ad.linear(x, w, b), targets, np.array([1.0, 0.0, 1.0])), [x, w, b]),
        (lambda: ad.sum(ad.log(ad.pick(ad.softmax(ad.linear(x, w, b)), targets))), [x, w, b]),
    ]
    for build, params in prims:
        worst = max(worst, check_grads(build, params))

    model = tiny_model(mode="cloud", seed=5, dropout=0.0)
    ex = _random_examples(2)
    nbrs = [[[1, 2, 3], [2, 5]], [], [[7, 8, 9, 10]]]
    worst = max(worst, check_grads(lambda: model.modifier.loss(ex, nbrs, None, training=False),
                                   model.parameters(), max_entries=48))
    masked = [[13, 2, 3, 13], [4, 13]]
    worst = max(worst, check_grads(
        lambda: model.recommender.loss(masked, [[0, 3], [1]], [[1, 3], [5]], None, training=False),
        model.recommender.parameters() + [model.encoder.item_emb, model.encoder.pos_emb], max_entries=48))
    elapsed = time.perf_counter() - t0
    assert elapsed < 60, f"gradient suite took {elapsed:.1f}s"
    return f"{len(prims)} primitives + 2 losses, max rel err {worst:.2e}, {elapsed:.1f}s"


def test_c1_gradient_suite():
    record("C1 gradient suite", check_gradients)


# ---------------------------------------------------------------- 2


def check_distributions() -> str:
    r = np.random.default_rng(2)
    worst = 0.0
    for trial in range(1000):
        model = tiny_model(seed=trial % 50).modifier
        scale = r.uniform(0.1, 5.0)
        for p in (model.op_proj, model.w_co, model.u_co, model.v_co, model.gate_co, model.gate_all):
            p.data = r.normal(0, scale, size=p.shape)
        ops = model.operation_distribution(Tensor(r.normal(0, scale, size=(2, 4, 8)))).data
        counts = (r.random((2, N_ITEMS + 1)) < 0.3) * r.integers(1, 5, size=(2, N_ITEMS + 1))
        counts[:, 0] = np.maximum(counts[:, 0], 1)  # at least one neighbor item per row
        present = r.random((2, 3)) < 0.7
        present[:, 0] = True
        mix = model.copy_distribution(Tensor(r.normal(0, scale, size=(2, 3, 8))),
                                      Tensor(r.normal(size=(2, 3, 8))), present, counts.astype(float)).data
        worst = max(worst, np.abs(ops.sum(-1) - 1).max(), np.abs(mix.sum(-1) - 1).max())
        model.gate_override = (1.0, 0.0)
        p_col = model.copy_distribution(Tensor(r.normal(0, scale, size=(2, 3, 8))),
                                        Tensor(r.normal(size=(2, 3, 8))), present, counts.astype(float)).data
        assert np.all(p_col[counts[:, None, :].repeat(3, 1) == 0] == 0.0), "P_col leaks onto absent items"
    assert worst < 1e-8, f"max |sum - 1| = {worst:.2e}"
    return f"1000 parameterizations, max |sum-1| {worst:.1e}, P_col exact zeros"


def test_c2_distribution_suite():
    record("C2 distribution suite", check_distributions)


# ---------------------------------------------------------------- 3


def check_oracles() -> str:
    r = np.random.default_rng(3)
    seqs = [InteractionSequence(f"u{i}", list(r.integers(1, 16, size=r.integers(4, 12)))) for i in range(30)]
    fast, slow = data.build_neighbor_index(seqs), data.brute_force_neighbor_index(seqs)
    assert fast.neighbors == slow.neighbors, "inverted index differs from brute force"

    for case in range(500):
        n_users = int(r.integers(1, 20))
        cases = [r.integers(0, 6, size=r.integers(2, 101)).astype(float) for _ in range(n_users)]
        results = [RankingResult.from_scores(list(range(1, len(c) + 1)), c) for c in cases]
        for k in (5, 10, 20):
            ranks = []
            for c in cases:
                order = sorted(range(len(c)), key=lambda i: (-c[i], i == 0))
                ranks.append(order.index(0) + 1)
            hr = float(np.mean([rk <= k for rk in ranks]))
            mrr = float(np.mean([1.0 / rk if rk <= k else 0.0 for rk in ranks]))
            assert hr_mrr(results, k) == (hr, mrr), f"metric mismatch in case {case}"

    model = tiny_model(dropout=0.0)
    model.encoder.item_emb.data[:] = 0.0
    rec = model.recommender.loss([[13, 2, 13], [4, 13]], [[0, 2], [1]], [[1, 3], [5]], None, training=False)
    err_rec = abs(rec.item() - 3 * np.log(N_ITEMS))
    model = tiny_model(dropout=0.0)
    model.modifier.op_proj.data[:] = 0.0
    ex = _random_examples(1)
    for e in ex:
        e.insert_targets = {}
    m = sum(len(e.labels) for e in ex)
    err_op = abs(model.modifier.loss(ex, None, None, training=False).item() - m * np.log(3))
    assert max(err_rec, err_op) < 1e-9, f"analytic loss error {max(err_rec, err_op):.2e}"
    return f"index exact, 500 ranking cases exact, analytic loss err {max(err_rec, err_op):.1e}"


def test_c3_oracle_equivalence():
    record("C3 oracle equivalence", check_oracles)


# ---------------------------------------------------------------- 4


def check_corruption() -> str:
    cfg = CorruptionConfig()
    noise = np.arange(1, 51)
    r = np.random.default_rng(4)
    counts = np.zeros(3)
    for seed in range(10_000):
        raw = [int(x) for x in r.integers(1, 51, size=r.integers(2, 51))]
        ex = corrupt(raw, cfg, Rng.derive(4, seed), noise, 52)
        assert reconstruct(ex, 52) == raw[ex.raw_start:], f"reconstruction failed for seed {seed}"
        assert ex.actions[-1] != Op.DELETE and ex.corrupted[-1] == raw[-1], "last item deleted"
        for a in ex.sampled_actions[1:-1]:
            counts[int(a)] += 1
    freq = counts / counts.sum()
    dev = np.abs(freq - [0.4, 0.5, 0.1]).max()
    assert dev <= 0.01, f"frequencies {freq.round(4)}"
    return f"10000 exact reconstructions, interior freqs {freq.round(4).tolist()}"


def test_c4_corruption_suite():
    record("C4 corruption suite", check_corruption)


# ---------------------------------------------------------------- 5


def _reference_run(modifier, anchor, owner_nbr):
    """Unbatched greedy reverse generation for one anchor."""
    nbr, owner = owner_nbr
    out = []
    for _ in range(modifier.max_insert_run):
        prefix = np.array([out], dtype=np.int64).reshape(1, -1)
        h = modifier.generator_hidden(Tensor(anchor[None]), prefix, np.ones((1, len(out) + 1), bool), None, False)
        probs = modifier._gen_probs(ad.index_select(h, [len(out)], 1), nbr, owner).data[0, 0]
        item = int(modifier.gen_vocab[probs.argmax()])
        if item == modifier.eos:
            break
        out.append(item)
    return out


def check_decode_bounds() -> str:
    r = np.random.default_rng(5)
    insert_runs = full_runs = checked = 0
    model = tiny_model(seed=0)
    mod = model.modifier
    for trial in range(1000):
        scale = r.uniform(0.2, 3.0)
        for p in model.parameters():
            p.data = r.normal(0, scale, size=p.shape)
        mod.op_proj.data[Op.INSERT] += r.uniform(0, 3)
        seq = [int(x) for x in r.integers(1, N_ITEMS + 1, size=r.integers(1, 51))]
        nbrs = [[[int(x) for x in r.integers(1, N_ITEMS + 1, size=r.integers(1, 8))]
                 for _ in range(r.integers(0, 4))]]
        out = mod.modify([seq], nbrs)[0]
        assert len(out.items) <= 60, f"|S^c| = {len(out.items)}"
        assert EOS not in out.items
        for t, run in out.insertions.items():
            assert len(run) <= 5, f"{len(run)} insertions at one anchor"
            insert_runs += 1
            full_runs += len(run) == 5
        if trial < 100 and out.insertions:
            with ad.no_tape():
                target, nbr, rep, _ = mod.decide([seq], nbrs)
                budget = 60 - sum(1 for o in out.operations if o != Op.DELETE)
                for t in sorted(out.insertions):
                    ref = _reference_run(mod, target.hidden.data[0, t], (nbr, np.array([0])))[:budget]
                    budget -= len(ref)
                    assert out.insertions[t] == ref[::-1], "decode does not stop at the first [eos]"
                    checked += 1
    return f"1000 decodes within bounds, {insert_runs} insertion runs ({full_runs} hit the cap), {checked} runs match eos-stop reference"


def test_c5_decode_bounds():
    record("C5 decode bounds", check_decode_bounds)


# ---------------------------------------------------------------- 6


def check_training_smoke(corpus) -> str:
    seqs, vocab, index = corpus
    streams, times = [], []
    for _ in range(2):
        model = CloudModel(vocab.n_items, ModelConfig(), seed=7)
        t0 = time.perf_counter()
        hist = fit(model, seqs, index, CorruptionConfig(), TrainConfig(epochs=20, seed=7, select_best=False))
        times.append(time.perf_counter() - t0)
        streams.append([e.total for e in hist.epochs])
    first, last = streams[0][0], streams[0][-1]
    drop = 1 - last / first
    assert times[0] < 600, f"20 epochs took {times[0]:.0f}s"
    assert drop >= 0.30, f"loss {first:.2f} -> {last:.2f}, drop {drop:.1%}"
    assert streams[0] == streams[1], "identically seeded runs diverge"
    return f"L {first:.2f} -> {last:.2f} (drop {drop:.1%}), {times[0]:.0f}s, streams identical"


@pytest.mark.slow
def test_c6_training_smoke(corpus):
    record("C6 training smoke", lambda: check_training_smoke(corpus))


# ---------------------------------------------------------------- 7


def check_trend(corpus) -> str:
    rows = {(mode, seed): trend_run(mode, seed, 100, corpus)["privacy"]
            for seed in (0, 1, 2) for mode in ("cloud", "variant1", "steam")}
    wins = sum(rows["cloud", s]["insert"] > rows["variant1", s]["insert"] for s in (0, 1, 2))
    sim_cloud = np.mean([rows["cloud", s]["similarity"] for s in (0, 1, 2)])
    sim_steam = np.mean([rows["steam", s]["similarity"] for s in (0, 1, 2)])
    detail = (f"insert CLOUD>Variant1 in {wins}/3 seeds, "
              f"similarity CLOUD {sim_cloud:.4f} vs STEAM {sim_steam:.4f}")
    assert wins >= 2 and sim_cloud < sim_steam, detail
    return detail


@pytest.mark.slow
def test_c7_trend_check(corpus):
    record("C7 trend check", lambda: check_trend(corpus))


# ---------------------------------------------------------------- 8


def check_mode_reduction(corpus) -> str:
    seqs, vocab, index = corpus
    hist = [s.history("test") for s in seqs]
    nbrs = [[seqs[j].train_items for j in index.ids(i)] for i in range(len(seqs))]

    def decode(mode, override=None):
        model = CloudModel(vocab.n_items, ModelConfig(dim=16, mode=mode), seed=3)
        model.modifier.op_proj.data[Op.INSERT] += 1.0  # make insertions common
        model.modifier.gate_override = override
        out = evaluation.modify_histories(model, hist, nbrs)
        return [(o.items, [int(x) for x in o.operations]) for o in out]

    cloud, v1 = decode("cloud", (0.0, 1.0)), decode("variant1")
    v2, steam = decode("variant2", (0.0, 1.0)), decode("steam")
    n_ins = sum(len(items) - sum(op != Op.DELETE for op in ops) for items, ops in cloud)
    assert cloud == v1, "CLOUD with P_all gate differs from Variant-1"
    assert v2 == steam, "copy-only mode with P_all gate differs from STEAM"
    return f"{len(seqs)} decodes bit-identical in both reductions ({n_ins} inserted items)"


def test_c8_mode_reduction(corpus):
    record("C8 mode reduction", lambda: check_mode_reduction(corpus))


# ---------------------------------------------------------------- 9


def check_robustness(corpus) -> str:
    seqs, vocab, index = corpus
    model = CloudModel(vocab.n_items, ModelConfig(dim=16), seed=9)
    fit(model, seqs, index, CorruptionConfig(), TrainConfig(epochs=1, seed=9, select_best=False))
    same, _ = evaluation.simulate_noise(seqs, vocab, 0, (1.0, 0.0, 0.0))
    zero = evaluation.robustness_report(model, seqs, same, index, vocab)
    assert zero["dist"] == 0.0, f"dist = {zero['dist']!r}"
    noisy, _ = evaluation.simulate_noise(seqs, vocab, 0, (0.4, 0.3, 0.3))
    rep = evaluation.robustness_report(model, seqs, noisy, index, vocab)
    assert {"Sum", "Sum_real", "dist"} <= set(rep) and all(np.isfinite(rep[k]) for k in ("Sum", "Sum_real", "dist"))
    return f"(1,0,0) dist = 0.0; (0.4,0.3,0.3) Sum {rep['Sum']:.4f} Sum_real {rep['Sum_real']:.4f} dist {rep['dist']:+.4f}"


def test_c9_robustness_protocol(corpus):
    record("C9 robustness protocol", lambda: check_robustness(corpus))


# ---------------------------------------------------------------- 10


def check_checkpoint(corpus) -> str:
    seqs, vocab, index = corpus
    model = CloudModel(vocab.n_items, ModelConfig(dim=16), seed=10)
    fit(model, seqs, index, CorruptionConfig(), TrainConfig(epochs=1, seed=10, select_best=False))
    before = [evaluation.evaluate(model, seqs, index, vocab, "test", route)[0] for route in ("modified", "raw")]
    with tempfile.TemporaryDirectory() as tmp:
        save_checkpoint(model, Path(tmp) / "ck")
        loaded, _ = load_checkpoint(Path(tmp) / "ck")
    after = [evaluation.evaluate(loaded, seqs, index, vocab, "test", route)[0] for route in ("modified", "raw")]
    assert before == after, "evaluation changed after reload"
    return f"metrics identical after reload (Sum {before[0]['Sum']:.4f} modified, {before[1]['Sum']:.4f} raw)"


def test_c10_checkpoint_round_trip(corpus):
    record("C10 checkpoint round-trip", lambda: check_checkpoint(corpus))


if __name__ == "__main__":
    shared = synthetic_corpus(seed=7)
    checks = [
        ("C1 gradient suite", check_gradients),
        ("C2 distribution suite", check_distributions),
        ("C3 oracle equivalence", check_oracles),
        ("C4 corruption suite", check_corruption),
        ("C5 decode bounds", check_decode_bounds),
        ("C6 training smoke", lambda: check_training_smoke(shared)),
        ("C7 trend check", lambda: check_trend(shared)),
        ("C8 mode reduction", lambda: check_mode_reduction(shared)),
        ("C9 robustness protocol", lambda: check_robustness(shared)),
        ("C10 checkpoint round-trip", lambda: check_checkpoint(shared)),
    ]
    only = set(sys.argv[1:])
    failed = 0
    for name, fn in checks:
        if only and name.split()[0] not in only:
            continue
        try:
            print(f"PASS  {name}: {fn()}", flush=True)
        except AssertionError as exc:
            failed += 1
            print(f"FAIL  {name}: {exc}", flush=True)
    sys.exit(1 if failed else 0)
