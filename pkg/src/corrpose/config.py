"""Run configuration: one JSON file drives dataset, training and evaluation."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .losses import LossWeights
from .network import NetworkConfig


class ConfigError(ValueError):
    """The run configuration is malformed or references missing paths."""


@dataclass
class DataConfig:
    data_dir: str = "data"
    count: int = 2500
    split_ratio: float = 0.8
    occlusion_max: float = 0.3
    noise_sigma: float = 0.002
    n_dense: int = 4096
    translation_range: float = 0.5

    def __post_init__(self):
        if not (0.0 <= self.split_ratio <= 1.0):
            raise ConfigError("split_ratio must lie in [0, 1]")
        if self.count < 1:
            raise ConfigError("count must be positive")
        if not (0.0 <= self.occlusion_max < 0.95):
            raise ConfigError("occlusion_max must lie in [0, 0.95)")


@dataclass
class RunConfig:
    network: NetworkConfig = field(default_factory=NetworkConfig)
    loss_weights: LossWeights = field(default_factory=LossWeights)
    data: DataConfig = field(default_factory=DataConfig)
    lr: float = 1e-3
    lr_decay_at: tuple = ()
    lr_decay_factor: float = 0.3
    epochs: int = 20
    batch_size: int = 8
    refine_iters: int = 2
    refine_train_iters: int = 2
    refine_loss_weight: float = 1.0
    val_fraction: float = 0.05
    val_max: int = 64
    seed: int = 42
    out_dir: str = "runs/run"

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be positive")
        if self.refine_iters < 0 or self.refine_train_iters < 0:
            raise ConfigError("refinement iteration counts must be nonnegative")
        self.lr_decay_at = tuple(self.lr_decay_at)
        if self.lr_decay_factor <= 0:
            raise ConfigError("lr_decay_factor must be positive")

    def lr_at_epoch(self, epoch: int) -> float:
        decays = sum(1 for e in self.lr_decay_at if epoch >= e)
        return self.lr * self.lr_decay_factor**decays

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @property
    def train_manifest(self) -> Path:
        return Path(self.data.data_dir) / "train.jsonl"

    @property
    def test_manifest(self) -> Path:
        return Path(self.data.data_dir) / "test.jsonl"


def _build(cls, payload: dict, context: str):
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(payload) - known
    if unknown:
        raise ConfigError(f"unknown {context} keys: {sorted(unknown)}")
    try:
        return cls(**payload)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad {context} section: {exc}") from exc


def config_from_dict(payload: dict) -> RunConfig:
    if not isinstance(payload, dict):
        raise ConfigError("config root must be a JSON object")
    payload = dict(payload)
    sections = {
        "network": (NetworkConfig, payload.pop("network", {})),
        "loss_weights": (LossWeights, payload.pop("loss_weights", {})),
        "data": (DataConfig, payload.pop("data", {})),
    }
    built = {name: _build(cls, sect, name) for name, (cls, sect) in sections.items()}
    known = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = set(payload) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    try:
        return RunConfig(**built, **payload)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad config: {exc}") from exc


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        payload = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    return config_from_dict(payload)


def save_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
