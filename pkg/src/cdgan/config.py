"""Experiment configuration: strict YAML schema, lossless round-trip,
content hash for checkpoint provenance.

Unknown keys are rejected everywhere; a typo in a loss weight must fail
loudly rather than silently invalidate an experiment.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields, is_dataclass

import yaml

from .augment import AugmentationSpec, PRESETS
from .data import DatasetDescriptor
from .losses import LossWeights
from .nets import ArchConfig
from .trainer import OptimConfig, TrainConfig

__all__ = ["ExperimentConfig", "ConfigError", "load_config", "save_config"]


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: DatasetDescriptor = field(default_factory=DatasetDescriptor)
    arch: ArchConfig = field(default_factory=ArchConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    augment_overrides: dict | None = None   # sparse overrides on the preset
    eval_interval: int = 500
    eval_samples: int = 1024
    seed: int = 0

    def augmentation_spec(self) -> AugmentationSpec:
        base = PRESETS[self.train.augment_preset].to_dict()
        if self.augment_overrides:
            unknown = set(self.augment_overrides) - set(base)
            if unknown:
                raise ConfigError(f"unknown augmentation overrides: {sorted(unknown)}")
            base.update(self.augment_overrides)
        return AugmentationSpec.from_dict(base)

    def to_dict(self) -> dict:
        return _as_plain(dataclasses.asdict(self))

    def hash(self) -> str:
        canon = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(canon.encode()).hexdigest()[:16]

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        return _build(cls, d, path="")


def _as_plain(obj):
    if isinstance(obj, dict):
        return {k: _as_plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_as_plain(v) for v in obj]
    return obj


def _build(cls, d, path):
    if d is None:
        d = {}
    if not isinstance(d, dict):
        raise ConfigError(f"expected a mapping at {path or 'top level'}, got {type(d).__name__}")
    fmap = {f.name: f for f in fields(cls)}
    unknown = set(d) - set(fmap)
    if unknown:
        raise ConfigError(f"unknown config keys at {path or 'top level'}: {sorted(unknown)}")
    kwargs = {}
    for name, f in fmap.items():
        if name not in d:
            continue
        value = d[name]
        sub = _nested_dataclass(f)
        if sub is not None and isinstance(value, dict):
            value = _build(sub, value, f"{path}{name}.")
        elif isinstance(value, list):
            value = tuple(value)
        kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid config at {path or 'top level'}: {exc}") from exc


_NESTED = {
    "dataset": DatasetDescriptor, "arch": ArchConfig, "optim": OptimConfig,
    "train": TrainConfig, "weights": LossWeights,
}


def _nested_dataclass(f):
    if f.name in _NESTED:
        return _NESTED[f.name]
    if is_dataclass(f.type):
        return f.type
    return None


def load_config(path) -> ExperimentConfig:
    try:
        with open(path) as fh:
            raw = yaml.safe_load(fh)
    except yaml.YAMLError as exc:
        raise ConfigError(f"malformed YAML in {path}: {exc}") from exc
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return ExperimentConfig.from_dict(raw or {})


def save_config(cfg: ExperimentConfig, path):
    with open(path, "w") as fh:
        yaml.safe_dump(cfg.to_dict(), fh, sort_keys=True)
