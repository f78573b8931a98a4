"""Experiment configuration: nested dataclasses read from / written to YAML.

Unknown keys and wrongly typed values are rejected with their dotted path. Absent keys take
the dataclass defaults, so an empty document is a valid (tiny) experiment.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import types
import typing
from dataclasses import dataclass, field

import yaml

from .orchestrator import TrainConfig


class ConfigError(ValueError):
    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path


@dataclass
class DataConfig:
    source: str = "synthetic"  # "synthetic" or a path to a dataset file
    num_classes: int = 10
    num_samples: int = 1200
    input_shape: list[int] = field(default_factory=lambda: [3, 8, 8])
    margin: float = 1.5
    test_fraction: float = 0.2
    min_client_samples: int = 4


@dataclass
class ModelConfig:
    channels: list[int] = field(default_factory=lambda: [8, 16])
    hidden: int = 64
    kernel: int = 5
    pad: int = 2


@dataclass
class FinetuneConfig:
    steps: int = 10
    lr: float | None = None  # None: reuse train.lr


@dataclass
class BoundConfig:
    estimate: bool = False
    beta: float = 1.0
    sigma2: float = 1.0
    eps0_sq: float = 1.0
    eps1_sq: float = 1.0
    delta_f: float = 1.0
    lrs: list[float] = field(default_factory=lambda: [0.001, 0.005, 0.01, 0.05])
    local_steps: list[int] = field(default_factory=lambda: [1, 2, 5])
    edge_rounds: list[int] = field(default_factory=lambda: [1, 2, 3])


@dataclass
class ExperimentConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    bound: BoundConfig = field(default_factory=BoundConfig)
    out_dir: str = "runs"
    name: str = "custom"


def _check(value, tp, path):
    origin = typing.get_origin(tp)
    if origin in (typing.Union, types.UnionType):
        args = typing.get_args(tp)
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _check(value, inner[0], path)
    if origin is list:
        if not isinstance(value, list):
            raise ConfigError(path, f"expected a list, got {type(value).__name__}")
        (item,) = typing.get_args(tp)
        return [_check(v, item, f"{path}[{i}]") for i, v in enumerate(value)]
    if dataclasses.is_dataclass(tp):
        return _build(tp, value, path)
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(path, f"expected a bool, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(path, f"expected an int, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(path, f"expected a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(path, f"expected a string, got {value!r}")
        return value
    raise ConfigError(path, f"unsupported type {tp}")


def _build(cls, data, path=""):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(path, f"expected a mapping, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    for key in data:
        if key not in names:
            raise ConfigError(f"{path}.{key}" if path else str(key), "unknown key")
    kwargs = {k: _check(v, hints[k], f"{path}.{k}" if path else k) for k, v in data.items()}
    return cls(**kwargs)


def from_dict(data: dict | None) -> ExperimentConfig:
    cfg = _build(ExperimentConfig, data)
    try:
        cfg.train.validate()
    except ValueError as e:
        raise ConfigError("train", str(e)) from None
    return cfg


def parse_config(text: str) -> ExperimentConfig:
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as e:
        raise ConfigError("", f"malformed YAML: {e}") from None
    return from_dict(data)


def to_dict(cfg: ExperimentConfig) -> dict:
    return dataclasses.asdict(cfg)


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(to_dict(cfg), sort_keys=False)


def config_hash(cfg: ExperimentConfig) -> str:
    """Short digest of everything except the output location."""
    d = to_dict(cfg)
    d.pop("out_dir")
    return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:10]


def preset(name: str) -> ExperimentConfig:
    if name == "paper-full":
        return from_dict({
            "name": "paper-full",
            "train": {"mode": "phsfl", "num_edges": 4, "num_clients": 100, "alpha": 0.1,
                      "local_epochs": 5, "edge_rounds": 3, "global_rounds": 100, "lr": 0.01,
                      "batch_size": 5, "batches_per_epoch": 32, "cut_after": 3},
            "data": {"source": "data/cifar10_train.phsfdata", "num_classes": 10,
                     "input_shape": [3, 32, 32], "min_client_samples": 2},
            "model": {"channels": [64, 128], "hidden": 256, "kernel": 5, "pad": 0},
            "finetune": {"steps": 10},
        })
    if name == "desk-small":
        return from_dict({
            "name": "desk-small",
            "train": {"mode": "phsfl", "num_edges": 2, "num_clients": 8, "alpha": 0.1,
                      "local_epochs": 2, "edge_rounds": 2, "global_rounds": 30, "lr": 0.05,
                      "batch_size": 8, "batches_per_epoch": 4, "cut_after": 3},
            "data": {"source": "synthetic", "num_classes": 10, "num_samples": 1200,
                     "input_shape": [3, 8, 8], "margin": 1.5, "min_client_samples": 4},
            "model": {"channels": [8, 16], "hidden": 64, "kernel": 5, "pad": 2},
            "finetune": {"steps": 10},
        })
    raise ConfigError("preset", f"unknown preset {name!r} (known: paper-full, desk-small)")


PRESETS = ("paper-full", "desk-small")
