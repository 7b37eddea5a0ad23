"""Model and training hyperparameters, serialized as JSON documents."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path


@dataclass
class ModelConfig:
    d: int = 128
    d_ff: int = 128
    heads: int = 8
    subgraph_layers: int = 3
    interaction_layers: int = 3
    k: int = 6
    t_past: int = 10
    t_future: int = 20
    # "static" pairs with the agent-centric frame, "adaptive" with the scene-centric one
    head: str = "adaptive"
    frame: str = "scene"
    h_dyn: int | None = None
    dropout: float = 0.1
    lane_radius: float = 50.0
    stop_gradient: bool = True
    refinement: bool = True
    iterative: bool = True
    dual_subgraph: bool = True
    dtype: str = "float64"
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.head not in ("static", "adaptive"):
            raise ValueError(f"head must be 'static' or 'adaptive', got {self.head!r}")
        if self.frame not in ("scene", "agent"):
            raise ValueError(f"frame must be 'scene' or 'agent', got {self.frame!r}")
        if self.d % 2 or self.d % self.heads:
            raise ValueError(f"d={self.d} must be even and divisible by heads={self.heads}")
        if self.k < 1 or self.t_past < 2 or self.t_future < 1:
            raise ValueError("need k >= 1, t_past >= 2, t_future >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")

    @property
    def agent_feature_width(self) -> int:
        return 4 + self.t_past - 1

    @property
    def dynamic_width(self) -> int:
        return self.h_dyn or self.d


@dataclass
class TrainConfig:
    batch_size: int = 64
    epochs: int = 36
    lr: float = 2e-4
    anneal_factor: float = 0.15
    milestones: tuple[float, float] = (0.7, 0.9)
    max_steps: int | None = None
    augment: bool = True
    scale_range: tuple[float, float] = (0.75, 1.25)
    agent_drop: float = 0.1
    # single-agent training: use every target as a sample, not only the agent of interest
    extended: bool = True
    min_displacement: float = 6.0
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    validate_every_epoch: bool = True
    seed: int = 0

    def __post_init__(self):
        self.milestones = tuple(self.milestones)
        self.scale_range = tuple(self.scale_range)
        self.adam_betas = tuple(self.adam_betas)
        self.validate()

    def validate(self) -> None:
        if not 0.0 < self.anneal_factor < 1.0:
            raise ValueError("anneal_factor must be in (0, 1)")
        if not all(0.0 < m < 1.0 for m in self.milestones) or list(self.milestones) != sorted(set(self.milestones)):
            raise ValueError("milestones must be strictly increasing fractions in (0, 1)")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be positive")
        lo, hi = self.scale_range
        if not 0 < lo <= hi:
            raise ValueError("scale_range must satisfy 0 < lo <= hi")
        if not 0.0 <= self.agent_drop < 1.0:
            raise ValueError("agent_drop must be in [0, 1)")


def _from_dict(cls, d: dict):
    known = {f.name for f in fields(cls)}
    unknown = set(d) - known
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return cls(**d)


def model_config_from_dict(d: dict) -> ModelConfig:
    return _from_dict(ModelConfig, d)


def train_config_from_dict(d: dict) -> TrainConfig:
    return _from_dict(TrainConfig, d)


def to_dict(cfg) -> dict:
    return asdict(cfg)


def load_json(path) -> dict:
    return json.loads(Path(path).read_text())
