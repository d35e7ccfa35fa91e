"""Run configuration: nested dataclasses read from and written to JSON.

Unknown keys are rejected at every level.  The file carries a ``version`` tag.
"""

import dataclasses
import json
import typing
from typing import Optional

from .data import OfflineGenConfig, OnlineTaskConfig
from .engine import EXECUTORS
from .model import ModelConfig
from .objectives import ObjectiveSpec

CONFIG_VERSION = "groupdpo-config/1"


class ConfigError(ValueError):
    pass


@dataclasses.dataclass(frozen=True)
class OptimizerConfig:
    name: str = "adamw"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.name not in ("sgd", "adamw"):
            raise ConfigError(f"unknown optimizer {self.name!r}")
        if not self.lr > 0:
            raise ConfigError("lr must be positive")


@dataclasses.dataclass(frozen=True)
class TrainConfig:
    executor: str = "surrogate"
    micro_batch: int = 8
    batch_groups: int = 8
    steps: int = 500
    eval_interval: int = 25
    seed: int = 17
    regime: str = "offline"
    online_prompts: int = 512
    eval_prompts: int = 128
    eval_groups: int = 32

    def __post_init__(self):
        if self.executor not in EXECUTORS:
            raise ConfigError(f"unknown executor {self.executor!r}")
        if self.micro_batch < 1:
            raise ConfigError("micro_batch must be >= 1")
        if self.steps < 1:
            raise ConfigError("step budget must be >= 1")
        if self.batch_groups < 1 or self.eval_interval < 1:
            raise ConfigError("batch_groups and eval_interval must be >= 1")
        if self.regime not in ("offline", "online"):
            raise ConfigError(f"unknown regime {self.regime!r}")


@dataclasses.dataclass(frozen=True)
class BenchConfig:
    group_sizes: tuple = (2, 4, 8, 16, 32)
    seq_lens: tuple = (16, 32, 64)
    executors: tuple = EXECUTORS
    micro_batch: int = 1
    activation_budget: Optional[int] = 600_000
    warmup_steps: int = 3
    measure_steps: int = 5
    seed: int = 17


@dataclasses.dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = ModelConfig()
    objective: ObjectiveSpec = ObjectiveSpec()
    optimizer: OptimizerConfig = OptimizerConfig()
    train: TrainConfig = TrainConfig()
    offline: OfflineGenConfig = dataclasses.field(default_factory=OfflineGenConfig)
    online: OnlineTaskConfig = dataclasses.field(default_factory=OnlineTaskConfig)
    bench: BenchConfig = BenchConfig()
    dataset: Optional[str] = None
    output_dir: str = "runs/default"
    version: str = CONFIG_VERSION


def _build(cls, data, where):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(fields)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    hints = typing.get_type_hints(cls)
    kwargs = {}
    for name, value in data.items():
        t = hints[name]
        if dataclasses.is_dataclass(t):
            kwargs[name] = _build(t, value, f"{where}.{name}")
        elif isinstance(value, list):
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


def from_dict(data):
    cfg = _build(RunConfig, data, "config")
    if cfg.version != CONFIG_VERSION:
        raise ConfigError(f"unsupported config version {cfg.version!r}")
    return cfg


def to_dict(cfg):
    return dataclasses.asdict(cfg)


def load_config(path):
    with open(path, encoding="utf-8") as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
    return from_dict(data)


def dump_config(cfg, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(to_dict(cfg), fh, indent=2, sort_keys=True)
        fh.write("\n")
