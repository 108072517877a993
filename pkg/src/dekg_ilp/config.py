"""Training configuration: defaults, flat ``key = value`` files, env overrides."""
from __future__ import annotations

import dataclasses
import os
import zlib
from dataclasses import dataclass, fields

import numpy as np


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    lr: float = 0.01
    d: int = 32
    beta: float = 0.5
    sigma: float = 0.1
    gamma_rank: float = 10.0
    gamma_c: float = 1.0
    theta: float = 2.0
    t: int = 2
    L: int = 3
    epochs: int = 100
    batch_size: int = 32
    negatives_per_positive: int = 1
    contrastive_samples: int = 10
    seed: int = 0
    node_cap: int = 500
    direction_aware: bool = False
    patience: int = 0
    disable_clrm_score: bool = False
    disable_contrastive: bool = False
    disable_improved_labeling: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for name in ("lr", "gamma_rank", "gamma_c", "theta"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if self.gamma_rank == 0 or self.gamma_c == 0 or self.theta == 0:
            raise ConfigError("margins and theta must be positive")
        if self.sigma < 0:
            raise ConfigError("sigma must be >= 0")
        if not 0 <= self.beta < 1:
            raise ConfigError("beta must lie in [0, 1)")
        for name in ("d", "t", "L", "batch_size", "negatives_per_positive", "contrastive_samples"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.epochs < 0 or self.patience < 0:
            raise ConfigError("epochs and patience must be >= 0")

    @property
    def effective_sigma(self) -> float:
        return 0.0 if self.disable_contrastive else self.sigma

    @property
    def improved_labeling(self) -> bool:
        return not self.disable_improved_labeling

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def dumps(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in self.to_dict().items())


def _coerce(name: str, raw: str, typ):
    raw = raw.strip()
    try:
        if typ is bool:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        return typ(raw)
    except ValueError:
        raise ConfigError(f"cannot parse {name} = {raw!r}") from None


_TYPES = {"float": float, "int": int, "bool": bool}


def _field_types() -> dict:
    return {f.name: _TYPES[f.type] if isinstance(f.type, str) else f.type for f in fields(TrainConfig)}


def parse_overrides(pairs: dict[str, str]) -> dict:
    types = _field_types()
    out = {}
    for k, v in pairs.items():
        if k not in types:
            raise ConfigError(f"unknown config key {k!r}")
        out[k] = _coerce(k, v, types[k])
    return out


def read_config_file(path: str | os.PathLike) -> dict[str, str]:
    pairs = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            k, v = line.split("=", 1)
            pairs[k.strip()] = v.strip()
    return pairs


def env_overrides(environ=None) -> dict[str, str]:
    environ = os.environ if environ is None else environ
    out = {}
    for name in _field_types():
        key = f"DEKG_{name.upper()}"
        if key in environ:
            out[name] = environ[key]
    return out


def resolve_config(path=None, environ=None, **explicit) -> TrainConfig:
    """Defaults <- config file <- ``DEKG_<FIELD>`` env vars <- explicit kwargs."""
    pairs: dict[str, str] = {}
    if path is not None:
        pairs.update(read_config_file(path))
    pairs.update(env_overrides(environ))
    values = parse_overrides(pairs)
    values.update({k: v for k, v in explicit.items() if v is not None})
    return TrainConfig(**values)


def rng_stream(seed: int, name: str) -> np.random.Generator:
    """Independent generator per (seed, purpose) pair."""
    return np.random.default_rng([int(seed), zlib.crc32(name.encode())])
