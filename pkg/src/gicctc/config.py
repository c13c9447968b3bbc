"""Run configuration: a YAML document parsed strictly into dataclasses.

Example::

    seed: 0
    model: {backbone: transformer, num_layers: 6, num_taps: 2, inter_weight: 0.5}
    optim: {peak_lr: 0.001, warmup_steps: 500}
    train: {epochs: 100, batch_size: 16}
    data:
      synth: {n_train: 256, n_valid: 64, noise_std: 0.5}
    decode: {mode: greedy}

Unknown keys anywhere are rejected.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .model import ConfigError, GicConfig
from .train import OptimConfig


@dataclass
class TrainSection:
    epochs: int = 100
    batch_size: int = 16
    sort_by_length: bool = False


@dataclass
class SynthSection:
    seed: int = 0
    n_train: int = 256
    n_valid: int = 64
    vocab_size: int = 8
    min_len: int = 4
    max_len: int = 10
    frames_per_token: int = 8
    noise_std: float = 0.05
    d_feat: int = 16
    allow_repeats: bool = False
    transition_concentration: float | None = None


@dataclass
class DataSection:
    vocab: str | None = None
    train_manifest: str | None = None
    valid_manifest: str | None = None
    synth: SynthSection | None = None


@dataclass
class DecodeSection:
    mode: str = "greedy"
    beam: int = 10
    lm: str | None = None
    lm_weight: float = 0.3
    length_bonus: float = 0.0


@dataclass
class RunConfig:
    seed: int = 0
    model: GicConfig = field(default_factory=GicConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    train: TrainSection = field(default_factory=TrainSection)
    data: DataSection = field(default_factory=DataSection)
    decode: DecodeSection = field(default_factory=DecodeSection)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def validate(self) -> None:
        self.model.validate()
        d = self.data
        if d.synth is None and d.train_manifest is None:
            raise ConfigError("data needs either a synth section or train_manifest")
        if d.train_manifest is not None and d.vocab is None:
            raise ConfigError("data.vocab is required with manifests")
        if self.decode.mode not in ("greedy", "beam"):
            raise ConfigError(f"decode.mode must be greedy or beam, got {self.decode.mode!r}")
        if self.train.batch_size < 1 or self.train.epochs < 0:
            raise ConfigError("train.batch_size >= 1 and train.epochs >= 0 required")


_NESTED = {
    RunConfig: {"model": GicConfig, "optim": OptimConfig, "train": TrainSection,
                "data": DataSection, "decode": DecodeSection},
    DataSection: {"synth": SynthSection},
}


def _build(cls, raw: Any, where: str):
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{where or 'config'}: expected a mapping")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - set(fields))
    if unknown:
        raise ConfigError(f"{where or 'config'}: unknown keys {unknown}")
    kwargs = {}
    for key, value in raw.items():
        sub = _NESTED.get(cls, {}).get(key)
        path = f"{where}.{key}" if where else key
        if sub is not None and value is not None:
            kwargs[key] = _build(sub, value, path)
        else:
            kwargs[key] = _coerce(fields[key], value, path)
    return cls(**kwargs)


def _coerce(f: dataclasses.Field, value, where: str):
    default = f.default if f.default is not dataclasses.MISSING else None
    if value is None or default is None:
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected a boolean")
        return value
    if isinstance(default, int) and not isinstance(value, bool):
        if isinstance(value, int):
            return value
        raise ConfigError(f"{where}: expected an integer")
    if isinstance(default, float):
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
        raise ConfigError(f"{where}: expected a number")
    if isinstance(default, str) and not isinstance(value, str):
        raise ConfigError(f"{where}: expected a string")
    return value


def from_dict(raw: dict) -> RunConfig:
    cfg = _build(RunConfig, raw, "")
    cfg.validate()
    return cfg


def load(path) -> RunConfig:
    try:
        raw = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return from_dict(raw or {})


def dump(cfg: RunConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False)
