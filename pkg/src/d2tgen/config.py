"""Run configuration: every tunable of a training/generation run in one JSON file."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .decoding import DecodeConfig
from .errors import ConfigError
from .seq2seq import ModelConfig
from .training import EnsembleConfig


@dataclass(frozen=True)
class OptimizerConfig:
    lr: float = 0.002
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float = 5.0
    batch_size: int = 64

    def __post_init__(self):
        if self.lr <= 0 or self.batch_size < 1:
            raise ValueError("lr must be positive and batch_size >= 1")


_SECTIONS = {
    "model": ModelConfig,
    "ensemble": EnsembleConfig,
    "decode": DecodeConfig,
    "optimizer": OptimizerConfig,
}


@dataclass(frozen=True)
class RunConfig:
    train_path: str | None = None
    valid_path: str | None = None
    out_dir: str = "run"
    model: ModelConfig = field(default_factory=ModelConfig)
    ensemble: EnsembleConfig = field(default_factory=EnsembleConfig)
    decode: DecodeConfig = field(default_factory=DecodeConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    epochs: int = 13
    seed: int = 1
    precision: int = 32
    threads: int = 1
    min_freq: int = 1
    strict_schema: bool = False

    def __post_init__(self):
        if self.precision not in (32, 64):
            raise ConfigError("precision must be 32 or 64")
        if self.epochs < 0 or self.threads < 1 or self.min_freq < 1:
            raise ConfigError("epochs >= 0, threads >= 1 and min_freq >= 1 are required")
        if self.ensemble.seed != self.seed:
            object.__setattr__(self, "ensemble", replace(self.ensemble, seed=self.seed))

    @classmethod
    def from_dict(cls, payload):
        known = {f.name for f in fields(cls)}
        unknown = set(payload) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kwargs = {}
        try:
            for key, value in payload.items():
                if key in _SECTIONS:
                    section = _SECTIONS[key]
                    extra = set(value) - {f.name for f in fields(section)}
                    if extra:
                        raise ConfigError(f"unknown keys in {key!r}: {sorted(extra)}")
                    value = section(**value)
                kwargs[key] = value
            return cls(**kwargs)
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(str(exc)) from exc

    def to_dict(self):
        return asdict(self)

    @classmethod
    def load(cls, path):
        try:
            payload = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        return cls.from_dict(payload)

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))

    def override(self, **changes):
        """Copy with top-level or ``section.key`` overrides; ``None`` values are ignored."""
        payload = self.to_dict()
        for key, value in changes.items():
            if value is None:
                continue
            if "." in key:
                section, name = key.split(".", 1)
                payload[section][name] = value
            else:
                payload[key] = value
        if "seed" in changes and changes["seed"] is not None:
            payload["ensemble"]["seed"] = changes["seed"]
        return RunConfig.from_dict(payload)

    def validate(self, need_train=True):
        if need_train and not self.train_path:
            raise ConfigError("train_path is not set")
        for name in ("train_path", "valid_path"):
            path = getattr(self, name)
            if path and not Path(path).is_file():
                raise ConfigError(f"{name} does not exist: {path}")
        return self
