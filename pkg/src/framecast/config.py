"""One versioned, strictly-parsed config file covering every pipeline stage.

Unknown fields are rejected rather than ignored so typos never silently fall
back to defaults; every run directory stores the resolved config it ran with.
"""

from __future__ import annotations

import dataclasses
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .distill import DistillConfig
from .flow import TrainConfig
from .model import ModelConfig
from .sampling import SampleConfig
from .world import WorldConfig

CONFIG_VERSION = 1


class ConfigError(ValueError):
    pass


@dataclass
class DataSection:
    num_episodes: int = 400
    episode_length: int = 17
    seed: int = 0
    repeat_p: float = 0.75
    val_frac: float = 0.1
    test_frac: float = 0.1
    patch: int = 8


@dataclass
class BenchSection:
    warmup: int = 1
    num_frames: int = 16
    trials: int = 3
    trace_repeat_p: float = 0.9
    quality_episodes: int = 4


@dataclass
class ServiceSection:
    host: str = "127.0.0.1"
    port: int = 8800
    max_sessions: int = 4
    queue_bound: int = 8
    idle_timeout: float = 300.0


@dataclass
class RunConfig:
    version: int = CONFIG_VERSION
    world: WorldConfig = field(default_factory=WorldConfig)
    data: DataSection = field(default_factory=DataSection)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    finetune: TrainConfig = field(default_factory=lambda: TrainConfig(steps=300, warmup_steps=0))
    distill: DistillConfig = field(default_factory=DistillConfig)
    sample: SampleConfig = field(default_factory=SampleConfig)
    bench: BenchSection = field(default_factory=BenchSection)
    service: ServiceSection = field(default_factory=ServiceSection)


def _build(cls, data, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected an object, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{path or 'config'}: unknown field(s) {unknown}; allowed: {sorted(names)}")
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name not in data:
            continue
        value = data[f.name]
        hint = hints.get(f.name)
        sub = f"{path}.{f.name}" if path else f.name
        if dataclasses.is_dataclass(hint):
            kwargs[f.name] = _build(hint, value, sub)
        elif isinstance(value, list) and typing.get_origin(hint) is tuple:
            kwargs[f.name] = tuple(value)
        else:
            kwargs[f.name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path or 'config'}: {exc}") from exc


def config_from_dict(data: dict) -> RunConfig:
    version = data.get("version", CONFIG_VERSION)
    if version != CONFIG_VERSION:
        raise ConfigError(f"unsupported config version {version!r}; this build reads version {CONFIG_VERSION}")
    return _build(RunConfig, data, "")


def config_to_dict(cfg: RunConfig) -> dict:
    return dataclasses.asdict(cfg)


def load_config(path: str | Path) -> RunConfig:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return config_from_dict(data)


def save_config(path: str | Path, cfg: RunConfig) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(config_to_dict(cfg), indent=2, sort_keys=True) + "\n")
