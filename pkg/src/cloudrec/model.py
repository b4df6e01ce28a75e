"""CloudModel: shared encoder + item-wise modifier + recommender."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .autodiff import Parameter, Rng
from .encoder import Encoder
from .modifier import Modifier, ModifierMode
from .recommender import Recommender

STAGE_INIT = 1


@dataclass(frozen=True)
class ModelConfig:
    dim: int = 64
    heads: int = 1
    layers: int = 1
    dropout: float = 0.5
    ffn_mult: int = 4
    activation: str = "gelu"
    mode: str = "cloud"
    recommender: str = "bi"
    anchor_from_shared: bool = False
    max_insert_run: int = 5
    max_modified_len: int = 60

    def __post_init__(self):
        ModifierMode(self.mode)
        if self.recommender not in ("bi", "uni"):
            raise ValueError(f"recommender must be 'bi' or 'uni', got {self.recommender!r}")
        if self.dim <= 0 or self.heads <= 0 or self.layers <= 0:
            raise ValueError("dim, heads and layers must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)


class CloudModel:
    def __init__(self, n_items: int, config: ModelConfig = ModelConfig(), seed: int = 0):
        self.n_items = n_items
        self.config = config
        self.seed = seed
        rng = Rng.derive(seed, STAGE_INIT)
        c = config
        self.encoder = Encoder(n_items + 3, c.dim, c.max_modified_len + 1, c.layers, c.heads, rng,
                               c.ffn_mult, c.activation)
        self.modifier = Modifier(self.encoder, n_items, c.dim, c.layers, c.heads, rng, ModifierMode(c.mode),
                                 c.max_insert_run, c.max_modified_len, c.dropout, c.ffn_mult, c.activation,
                                 c.anchor_from_shared)
        self.recommender = Recommender(self.encoder, n_items, c.dim, c.layers, c.heads, rng, c.recommender,
                                       c.dropout, c.ffn_mult, c.activation)

    @property
    def mask_id(self) -> int:
        return self.n_items + 1

    @property
    def eos(self) -> int:
        return self.n_items + 2

    def parameters(self) -> list[Parameter]:
        return self.encoder.parameters() + self.modifier.parameters() + self.recommender.parameters()

    def named_parameters(self) -> dict[str, Parameter]:
        return {p.name: p for p in self.parameters()}

    def state(self) -> dict[str, np.ndarray]:
        return {p.name: p.data.copy() for p in self.parameters()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        named = self.named_parameters()
        missing = set(named) - set(state)
        if missing:
            raise KeyError(f"state is missing parameters: {sorted(missing)[:5]}")
        for name, p in named.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {p.shape}")
            p.data = arr.copy()

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None
