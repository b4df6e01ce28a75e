"""Joint modifier + recommender training, Adam, clipping and checkpoints."""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Rng
from .corruption import CorruptionConfig, corrupt, mask_for_recommender
from .data import InteractionSequence, NeighborIndex
from .model import CloudModel, ModelConfig

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1

# per-stage seed salts
STAGE_SHUFFLE, STAGE_CORRUPT, STAGE_MASK, STAGE_DROPOUT = 11, 12, 13, 14


class NonFiniteError(FloatingPointError):
    pass


class CheckpointError(ValueError):
    pass


class CheckpointIntegrityError(CheckpointError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_lo: float = -5.0
    clip_hi: float = 5.0
    epochs: int = 100
    batch_size: int = 64
    seed: int = 0
    regenerate: str = "epoch"  # S^c cadence: "epoch" | "batch"
    resample_corruption: bool = True
    select_best: bool = True
    use_modifier_loss: bool = True
    use_recommender_loss: bool = True

    def __post_init__(self):
        if self.learning_rate < 0 or self.batch_size <= 0 or self.epochs < 0:
            raise ValueError("learning_rate must be >= 0, batch_size > 0, epochs >= 0")
        if not self.clip_lo < self.clip_hi:
            raise ValueError("clip_lo must be below clip_hi")
        if self.regenerate not in ("epoch", "batch"):
            raise ValueError(f"regenerate must be 'epoch' or 'batch', got {self.regenerate!r}")


@dataclass
class LossBreakdown:
    modifier: float
    recommender: float

    @property
    def total(self) -> float:
        return self.modifier + self.recommender

    def to_dict(self) -> dict:
        return {"L_mod": self.modifier, "L_rec": self.recommender, "L": self.total}


@dataclass
class TrainHistory:
    epochs: list[LossBreakdown] = field(default_factory=list)
    batches: list[LossBreakdown] = field(default_factory=list)
    valid_hr10: list[float] = field(default_factory=list)
    best_epoch: int | None = None
    seconds: float = 0.0


# ---------------------------------------------------------------- optimizer


def clip_gradients(grads: np.ndarray, lo: float = -5.0, hi: float = 5.0) -> np.ndarray:
    return np.clip(grads, lo, hi)


def adam_step(params: Sequence[Parameter], lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> None:
    """Bias-corrected Adam on each parameter's ``grad`` (missing grads count as zero)."""
    for p in params:
        g = np.zeros_like(p.data) if p.grad is None else p.grad
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for parameter {p.name!r}")
        p.step_count += 1
        p.adam_m = beta1 * p.adam_m + (1 - beta1) * g
        p.adam_v = beta2 * p.adam_v + (1 - beta2) * g * g
        m_hat = p.adam_m / (1 - beta1 ** p.step_count)
        v_hat = p.adam_v / (1 - beta2 ** p.step_count)
        p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + eps)


# ---------------------------------------------------------------- loss assembly


def neighbor_sequences(sequences: Sequence[InteractionSequence], index: NeighborIndex, sid: int) -> list[list[int]]:
    return [sequences[j].train_items for j in index.ids(sid)]


def regenerate(model: CloudModel, sequences, index, sids: Sequence[int], batch_size: int = 64) -> dict[int, list[int]]:
    """Gradient-free greedy decode of the raw training sequences."""
    out = {}
    for start in range(0, len(sids), batch_size):
        chunk = list(sids[start:start + batch_size])
        mods = model.modifier.modify(
            [sequences[s].train_items for s in chunk],
            [neighbor_sequences(sequences, index, s) for s in chunk],
        )
        for s, m in zip(chunk, mods):
            out[s] = m.items
    return out


def batch_losses(model: CloudModel, sequences, index, sids: Sequence[int], modified: dict[int, list[int]],
                 corruption: CorruptionConfig, cfg: TrainConfig, epoch: int, batch_no: int,
                 training: bool = True):
    """(L_mod, L_rec) summed over the batch, as tensors on the active tape."""
    vocab_items = np.arange(1, model.n_items + 1)
    drop_rng = Rng.derive(cfg.seed, STAGE_DROPOUT, epoch, batch_no)
    corr_epoch = epoch if cfg.resample_corruption else 0

    l_mod = ad.Tensor(0.0)
    if cfg.use_modifier_loss:
        examples, nbrs = [], []
        for s in sids:
            raw = sequences[s].train_items
            if len(raw) < 2:
                continue
            examples.append(corrupt(raw, corruption, Rng.derive(cfg.seed, STAGE_CORRUPT, corr_epoch, s),
                                    vocab_items, model.eos))
            nbrs.append(neighbor_sequences(sequences, index, s))
        if examples:
            l_mod = model.modifier.loss(examples, nbrs, drop_rng, training)

    l_rec = ad.Tensor(0.0)
    if cfg.use_recommender_loss:
        policy = model.recommender.mask_policy
        for view_code, view in ((0, lambda s: sequences[s].train_items), (1, lambda s: modified.get(s, []))):
            masked, positions, targets = [], [], []
            for s in sids:
                seq = view(s)
                if not seq:
                    continue
                m, p, t = mask_for_recommender(seq, corruption.p_mask,
                                               Rng.derive(cfg.seed, STAGE_MASK, epoch, view_code, s),
                                               model.mask_id, policy)
                masked.append(m)
                positions.append(p)
                targets.append(t)
            if masked:
                l_rec = ad.add(l_rec, model.recommender.loss(masked, positions, targets, drop_rng, training))
    return l_mod, l_rec


def train_epoch(model: CloudModel, sequences, index, corruption: CorruptionConfig, cfg: TrainConfig,
                epoch: int, history: TrainHistory | None = None) -> LossBreakdown:
    """One pass over all users. Reported losses are per-sequence means."""
    sids = [int(s) for s in Rng.derive(cfg.seed, STAGE_SHUFFLE, epoch).permutation(len(sequences))]
    modified = regenerate(model, sequences, index, sids) if cfg.regenerate == "epoch" else {}
    params = model.parameters()
    sum_mod = sum_rec = 0.0
    for batch_no, start in enumerate(range(0, len(sids), cfg.batch_size)):
        batch = sids[start:start + cfg.batch_size]
        if cfg.regenerate == "batch":
            modified = regenerate(model, sequences, index, batch)
        model.zero_grad()
        with ad.Tape() as tape:
            l_mod, l_rec = batch_losses(model, sequences, index, batch, modified, corruption, cfg, epoch, batch_no)
            total = ad.scale(ad.add(l_mod, l_rec), 1.0 / len(batch))
        lm, lr_ = l_mod.item(), l_rec.item()
        if not np.isfinite(lm + lr_):
            raise NonFiniteError(f"non-finite loss at epoch {epoch} batch {batch_no}: L_mod={lm} L_rec={lr_}")
        tape.backward(total)
        for p in params:
            if p.grad is not None:
                if not np.all(np.isfinite(p.grad)):
                    raise NonFiniteError(f"non-finite gradient for parameter {p.name!r} at epoch {epoch} batch {batch_no}")
                p.grad = clip_gradients(p.grad, cfg.clip_lo, cfg.clip_hi)
        adam_step(params, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps)
        sum_mod += lm
        sum_rec += lr_
        if history is not None:
            history.batches.append(LossBreakdown(lm / len(batch), lr_ / len(batch)))
    n = max(len(sids), 1)
    return LossBreakdown(sum_mod / n, sum_rec / n)


def fit(model: CloudModel, sequences, index, corruption: CorruptionConfig, cfg: TrainConfig,
        validate: Callable[[CloudModel], float] | None = None,
        on_epoch: Callable[[int, LossBreakdown], None] | None = None) -> TrainHistory:
    """Train for ``cfg.epochs``; with ``validate`` and ``select_best`` the best
    validation HR@10 epoch's parameters are restored at the end."""
    history = TrainHistory()
    t0 = time.perf_counter()
    best = (-np.inf, None)
    for epoch in range(1, cfg.epochs + 1):
        losses = train_epoch(model, sequences, index, corruption, cfg, epoch, history)
        history.epochs.append(losses)
        if validate is not None:
            hr = validate(model)
            history.valid_hr10.append(hr)
            if cfg.select_best and hr > best[0]:
                best = (hr, model.state())
                history.best_epoch = epoch
        if on_epoch is not None:
            on_epoch(epoch, losses)
        log.info("epoch %d: L_mod=%.4f L_rec=%.4f L=%.4f", epoch, losses.modifier, losses.recommender, losses.total)
    if cfg.select_best and best[1] is not None:
        model.load_state(best[1])
    history.seconds = time.perf_counter() - t0
    return history


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(model: CloudModel, path: str | Path, extra: dict | None = None) -> None:
    """Directory with ``manifest.json`` and ``params.bin`` (little-endian float64)."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries, chunks, offset = [], [], 0
    for p in sorted(model.parameters(), key=lambda q: q.name):
        arr = np.ascontiguousarray(p.data, dtype="<f8")
        entries.append({"name": p.name, "shape": list(arr.shape), "offset": offset, "count": int(arr.size)})
        chunks.append(arr.tobytes())
        offset += arr.size
    blob = b"".join(chunks)
    (path / "params.bin").write_bytes(blob)
    manifest = {
        "format_version": CHECKPOINT_VERSION,
        "n_items": model.n_items,
        "seed": model.seed,
        "model_config": model.config.to_dict(),
        "params": entries,
        "sha256": hashlib.sha256(blob).hexdigest(),
        **(extra or {}),
    }
    (path / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=1) + "\n", encoding="utf-8")


def read_manifest(path: str | Path) -> dict:
    manifest = json.loads((Path(path) / "manifest.json").read_text(encoding="utf-8"))
    if manifest.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"checkpoint format_version {manifest.get('format_version')!r}, expected {CHECKPOINT_VERSION}")
    return manifest


def load_checkpoint(path: str | Path) -> tuple[CloudModel, dict]:
    path = Path(path)
    manifest = read_manifest(path)
    blob = (path / "params.bin").read_bytes()
    if hashlib.sha256(blob).hexdigest() != manifest["sha256"]:
        raise CheckpointIntegrityError(f"{path}: checksum mismatch, checkpoint is corrupt or was modified")
    values = np.frombuffer(blob, dtype="<f8")
    model = CloudModel(manifest["n_items"], ModelConfig(**manifest["model_config"]), seed=manifest["seed"])
    state = {
        e["name"]: values[e["offset"]:e["offset"] + e["count"]].reshape(e["shape"]).astype(np.float64)
        for e in manifest["params"]
    }
    model.load_state(state)
    return model, manifest


def config_dict(cfg) -> dict:
    return asdict(cfg)
