"""Experiment configuration: one flat dataclass, loadable from TOML or JSON."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, fields
from pathlib import Path

import tomli

from .corruption import CorruptionConfig
from .model import ModelConfig
from .training import TrainConfig


class ConfigError(ValueError):
    pass


# output locations do not change results, so they stay out of the config hash
_UNHASHED = ("data_dir", "output_dir", "checkpoint")


@dataclass
class ExperimentConfig:
    # paths
    events: str | None = None
    data_dir: str = "data"
    output_dir: str = "runs"
    checkpoint: str | None = None
    date_start: int | None = None
    date_end: int | None = None
    # synthetic corpus
    synthetic_users: int = 200
    synthetic_items: int = 50
    synthetic_clusters: int = 2
    # evaluation candidates: an integer count or "all"
    negatives: int | str = 99
    # corruption
    p_keep: float = 0.4
    p_delete: float = 0.5
    p_insert: float = 0.1
    p_mask: float = 0.5
    max_raw_len: int = 50
    max_insert_run: int = 5
    max_modified_len: int = 60
    # model
    dim: int = 64
    heads: int = 1
    layers: int = 1
    dropout: float = 0.5
    ffn_mult: int = 4
    activation: str = "gelu"
    mode: str = "cloud"
    recommender: str = "bi"
    anchor_from_shared: bool = False
    # training
    learning_rate: float = 0.001
    clip_lo: float = -5.0
    clip_hi: float = 5.0
    epochs: int = 100
    batch_size: int = 64
    regenerate: str = "epoch"
    resample_corruption: bool = True
    select_best: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.negatives != "all":
            self.negatives = self.negative_count()
        self.corruption()
        self.model()
        self.training()

    def negative_count(self) -> int | None:
        if self.negatives == "all":
            return None
        try:
            n = int(self.negatives)
        except (TypeError, ValueError):
            raise ConfigError(f"negatives must be an integer or 'all', got {self.negatives!r}") from None
        if n <= 0:
            raise ConfigError("negatives must be positive")
        return n

    def _build(self, cls):
        names = {f.name for f in fields(cls)}
        try:
            return cls(**{k: v for k, v in dataclasses.asdict(self).items() if k in names})
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    def corruption(self) -> CorruptionConfig:
        return self._build(CorruptionConfig)

    def model(self) -> ModelConfig:
        return self._build(ModelConfig)

    def training(self) -> TrainConfig:
        return self._build(TrainConfig)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def hash(self) -> str:
        body = {k: v for k, v in self.to_dict().items() if k not in _UNHASHED}
        return hashlib.sha256(json.dumps(body, sort_keys=True).encode()).hexdigest()[:16]

    def replace(self, **overrides) -> "ExperimentConfig":
        return from_dict({**self.to_dict(), **{k: v for k, v in overrides.items() if v is not None}})


def from_dict(raw: dict) -> ExperimentConfig:
    known = {f.name for f in fields(ExperimentConfig)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    try:
        return ExperimentConfig(**raw)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path: str | Path | None) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    try:
        raw = tomli.loads(text) if path.suffix == ".toml" else json.loads(text)
    except (tomli.TOMLDecodeError, json.JSONDecodeError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a table/object")
    return from_dict(raw)
