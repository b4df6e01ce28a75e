import numpy as np
import pytest

from cloudrec import autodiff as ad
from cloudrec import data
from cloudrec.autodiff import Rng
from cloudrec.model import CloudModel, ModelConfig


def numeric_grad(f, x: np.ndarray, h: float = 1e-6, entries=None) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. ``x`` (mutated in place).

    ``entries`` restricts the probe to those flat indices (others stay 0).
    """
    g = np.zeros_like(x)
    flat = range(x.size) if entries is None else entries
    for j in flat:
        i = np.unravel_index(j, x.shape)
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


# Gradients that are zero in exact arithmetic (e.g. a key bias under softmax)
# come out of central differences as ~1e-9 noise; below this scale the error
# is measured in absolute terms.
GRAD_FLOOR = 1e-3


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    scale = max(np.abs(a).max(), np.abs(b).max(), GRAD_FLOOR)
    return float(np.abs(a - b).max() / scale)


def check_grads(build, params, tol=1e-4, h=1e-6, max_entries=None, seed=0):
    """``build()`` returns a scalar Tensor computed from ``params``.

    With ``max_entries`` each large parameter is probed at that many random
    entries instead of all of them.
    """
    pick = np.random.default_rng(seed)
    for p in params:
        p.grad = None
    with ad.Tape() as tape:
        out = build()
    tape.backward(out)
    worst = 0.0
    for p in params:
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
        entries = None
        if max_entries is not None and p.data.size > max_entries:
            entries = pick.choice(p.data.size, size=max_entries, replace=False)
            mask = np.zeros(p.data.size, dtype=bool)
            mask[entries] = True
            analytic = np.where(mask.reshape(p.shape), analytic, 0.0)
        numeric = numeric_grad(lambda: build().item(), p.data, h, entries)
        worst = max(worst, rel_error(analytic, numeric))
    assert worst < tol, f"max relative error {worst:.3e}"
    return worst


@pytest.fixture
def rng():
    return Rng(1234)


@pytest.fixture(scope="session")
def synthetic_corpus():
    """200 users / 50 items synthetic corpus, seed 7, with index and negatives."""
    events = data.generate_synthetic_corpus(200, 50, rng=Rng.derive(7, 32))
    events = data.five_core_filter(events)
    seqs, vocab = data.build_sequences(events)
    data.sample_negatives(seqs, vocab, 99, seed=7)
    index = data.build_neighbor_index(seqs)
    return seqs, vocab, index


@pytest.fixture(scope="session")
def small_corpus():
    events = data.generate_synthetic_corpus(40, 24, rng=Rng(3))
    events = data.five_core_filter(events)
    seqs, vocab = data.build_sequences(events)
    data.sample_negatives(seqs, vocab, 99, seed=3)
    index = data.build_neighbor_index(seqs)
    return seqs, vocab, index


def tiny_model(mode="cloud", seed=0, n_items=12, dim=8, **kw) -> CloudModel:
    cfg = ModelConfig(dim=dim, mode=mode, **kw)
    return CloudModel(n_items, cfg, seed=seed)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in RESULTS:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
