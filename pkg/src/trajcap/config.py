"""Run configuration: JSON file, then ``T2C_SEED``, then command-line flags."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Mapping, Optional

from trajcap.captioner import FREEZE_PRESETS, ModelConfig, TrainConfig
from trajcap.encoders import FUSIONS, QUERY_SOURCES, EncoderConfig, FusionError

SEED_ENV = "T2C_SEED"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    fusion: str = "xattn"
    xattn_query: Optional[str] = None
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    epochs: int = 10
    batch_size: int = 16
    lr: float = 1.5e-3
    freeze: str = "frozen-backbone"
    seed: int = 0
    data_dir: Optional[str] = None
    out_dir: Optional[str] = None

    def __post_init__(self):
        if self.fusion not in FUSIONS:
            raise ConfigError(f"unknown fusion {self.fusion!r}; expected one of {FUSIONS}")
        if self.fusion == "baseline" and self.xattn_query is not None:
            raise ConfigError("fusion=baseline forbids xattn_query")
        if self.xattn_query is not None and self.xattn_query not in QUERY_SOURCES:
            raise ConfigError(f"unknown xattn_query {self.xattn_query!r}; expected one of {QUERY_SOURCES}")
        if self.freeze not in FREEZE_PRESETS:
            raise ConfigError(f"unknown freeze preset {self.freeze!r}; expected one of {FREEZE_PRESETS}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be positive")
        if not self.lr > 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")

    def model_config(self) -> ModelConfig:
        query = self.xattn_query or ("image" if self.fusion == "xattn" else None)
        return ModelConfig(fusion=self.fusion, xattn_query=query, encoder=self.encoder)

    def train_config(self) -> TrainConfig:
        return TrainConfig(epochs=self.epochs, batch_size=self.batch_size, lr=self.lr,
                           freeze=self.freeze, seed=self.seed)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["encoder"] = self.encoder.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: Mapping[str, Any], source: str = "config") -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"{source}: unknown keys {unknown}")
        d = dict(d)
        try:
            if "encoder" in d:
                d["encoder"] = EncoderConfig(**d["encoder"])
            return cls(**d)
        except (TypeError, FusionError, ConfigError) as exc:
            raise ConfigError(f"{source}: {exc}") from None


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        d = json.loads(path.read_text())
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from None
    if not isinstance(d, dict):
        raise ConfigError(f"{path}: expected a JSON object")
    return RunConfig.from_dict(d, str(path))


def resolve_config(path=None, overrides: Optional[Mapping[str, Any]] = None, env=None) -> RunConfig:
    """File values, then ``T2C_SEED``, then non-None ``overrides``; later wins."""
    cfg = load_config(path) if path is not None else RunConfig()
    env = os.environ if env is None else env
    if env.get(SEED_ENV):
        try:
            cfg = replace(cfg, seed=int(env[SEED_ENV]))
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {env[SEED_ENV]!r}") from None
    updates = {k: v for k, v in (overrides or {}).items() if v is not None}
    if updates:
        d = cfg.to_dict()
        d.update(updates)
        cfg = RunConfig.from_dict(d, "flags")
    return cfg
