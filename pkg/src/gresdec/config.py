"""Run configuration: one JSON file, loaded into nested dataclasses."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path


@dataclass
class ModelConfig:
    dim: int = 32
    n_heads: int = 4
    sdm_layers: int = 3
    upsample_mode: str = "bilinear"
    kernel: str = "pooled"
    react: str = "concat_linear"
    mha_residual: bool = True
    token_reduce: str = "sum"
    reduction: int = 4
    activation: str = "relu"
    max_len: int = 20
    # ablation switches
    intra: bool = True
    inter: bool = True
    hsd: bool = True
    aoc: str = "full"               # full | off | binary_only
    deep_supervision: bool = False

    def __post_init__(self):
        if self.sdm_layers < 1:
            raise ValueError("sdm_layers must be >= 1")


@dataclass
class LossConfig:
    lambda_mask: float = 2.0
    lambda_count: float = 0.1
    lambda_exist: float = 1.0


@dataclass
class OptimConfig:
    lr: float = 1e-3
    weight_decay: float = 0.05
    schedule: str = "cosine"        # cosine | constant
    steps: int = 2000
    batch: int = 8
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        if self.schedule not in ("cosine", "constant"):
            raise ValueError(f"unknown schedule {self.schedule!r}")


@dataclass
class DataConfig:
    path: str = "data/toy"


@dataclass
class Config:
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    data: DataConfig = field(default_factory=DataConfig)
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        for k in ("lambda_mask", "lambda_count", "lambda_exist"):
            if getattr(self.loss, k) < 0:
                raise ValueError(f"{k} must be >= 0")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"unsupported dtype {self.dtype!r}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "Config":
        d = dict(d)
        sections = {"model": ModelConfig, "loss": LossConfig, "optim": OptimConfig, "data": DataConfig}
        kwargs = {k: sub(**d.pop(k, {})) for k, sub in sections.items()}
        return cls(**kwargs, **d)

    @classmethod
    def load(cls, path) -> "Config":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def replace(self, **sections) -> "Config":
        """``cfg.replace(model={"intra": False}, seed=3)`` returns an updated copy."""
        d = self.to_dict()
        for k, v in sections.items():
            if isinstance(v, dict):
                d[k].update(v)
            else:
                d[k] = v
        return Config.from_dict(d)
