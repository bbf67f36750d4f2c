"""YAML run configuration with dotted ``key=value`` overrides."""

from __future__ import annotations

import copy
from dataclasses import MISSING, asdict, dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Any

import yaml

from .features import BackboneConfig
from .model import EncoderConfig
from .pipeline import PipelineConfig
from .training import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    train_manifest: str | None = None
    dev_manifest: str | None = None


@dataclass
class SubsetConfig:
    manifests: dict[str, str] = field(default_factory=dict)
    ratios: list[float] = field(default_factory=lambda: [0.75, 0.5, 0.25, 0.05])
    seed: int = 0


@dataclass
class InferConfig:
    checkpoint: str | None = None
    manifest: str | None = None
    dump_activity: bool = False


@dataclass
class ScoreConfig:
    hyp_dir: str | None = None
    references: dict[str, str] = field(default_factory=dict)
    collars: list[float] = field(default_factory=lambda: [0.0, 0.25])
    score_overlap: bool = True
    use_uem: bool = True


@dataclass
class BenchConfig:
    checkpoint: str | None = None
    audio: str | None = None


@dataclass
class RunConfig:
    output_dir: str = "exp"
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    model: EncoderConfig = field(default_factory=EncoderConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    data: DataConfig = field(default_factory=DataConfig)
    subset: SubsetConfig = field(default_factory=SubsetConfig)
    infer: InferConfig = field(default_factory=InferConfig)
    score: ScoreConfig = field(default_factory=ScoreConfig)
    bench: BenchConfig = field(default_factory=BenchConfig)


def _build(cls, values: dict, where: str):
    if not isinstance(values, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(values).__name__}")
    known = {f.name: f for f in fields(cls)}
    unknown = set(values) - set(known)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for name, value in values.items():
        factory = known[name].default_factory
        if factory is not MISSING and isinstance(value, dict) and is_dataclass(default := factory()):
            value = _build(type(default), value, f"{where}.{name}")
        kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def apply_overrides(raw: dict, overrides: list[str]) -> dict:
    raw = copy.deepcopy(raw)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override must look like key=value: {item!r}")
        key, value = item.split("=", 1)
        node = raw
        parts = key.strip().split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"cannot override {key}: {p} is not a section")
        node[parts[-1]] = yaml.safe_load(value)
    return raw


def load_config(path: str | Path | None = None, overrides: list[str] = ()) -> RunConfig:
    raw: dict[str, Any] = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        raw = yaml.safe_load(path.read_text()) or {}
    raw = apply_overrides(raw, list(overrides))
    return _build(RunConfig, raw, "config")


def to_dict(config: RunConfig) -> dict:
    def clean(x):
        if isinstance(x, dict):
            return {k: clean(v) for k, v in x.items()}
        if isinstance(x, (list, tuple)):
            return [clean(v) for v in x]
        return x

    return clean(asdict(config))


def dump_config(config: RunConfig, path: str | Path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(yaml.safe_dump(to_dict(config), sort_keys=False))
