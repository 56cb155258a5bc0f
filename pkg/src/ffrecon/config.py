"""Run configuration in YAML.

Top-level keys::

    mode: vo | sfm | eval | synth
    predictor: synthetic | exchange
    seed: int
    out: output directory
    exchange: {dir: ..., command: ...}
    vo: {VoConfig fields}
    sfm: {SfmConfig fields}
    oracle: {OracleConfig fields except seed}

Missing keys take their defaults; unknown keys are rejected.  Saving writes
every key with sorted mappings, so ``save(load(x))`` is canonical.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .oracle import OracleConfig
from .sfm import SfmConfig
from .vo import VoConfig

MODES = ("vo", "sfm", "eval", "synth")
PREDICTORS = ("synthetic", "exchange")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExchangeConfig:
    dir: str | None = None
    command: str | None = None


@dataclass(frozen=True)
class RunConfig:
    mode: str = "vo"
    predictor: str = "synthetic"
    seed: int = 0
    out: str = "run"
    exchange: ExchangeConfig = field(default_factory=ExchangeConfig)
    vo: VoConfig = field(default_factory=VoConfig)
    sfm: SfmConfig = field(default_factory=SfmConfig)
    oracle: OracleConfig = field(default_factory=OracleConfig)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError("invariant violation: mode")
        if self.predictor not in PREDICTORS:
            raise ConfigError("invariant violation: predictor")
        if self.oracle.seed != self.seed:
            object.__setattr__(self, "oracle", dataclasses.replace(self.oracle, seed=self.seed))

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        d["oracle"].pop("seed")
        return d


_SECTIONS = {"exchange": ExchangeConfig, "vo": VoConfig, "sfm": SfmConfig, "oracle": OracleConfig}
_EXCLUDED = {"oracle": {"seed"}}


def _check_type(path: str, value, default, annotation: str):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"invalid type at {path}: expected bool")
    elif isinstance(default, int) and "float" not in annotation:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"invalid type at {path}: expected int")
    elif isinstance(default, float) or "float" in annotation:
        if value is None and "None" in annotation:
            return value
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"invalid type at {path}: expected number")
        return float(value)
    elif isinstance(default, str) or "str" in annotation:
        if value is None and "None" in annotation:
            return value
        if not isinstance(value, str):
            raise ConfigError(f"invalid type at {path}: expected string")
    return value


def _build(cls, data, section: str):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"invalid type at {section}: expected mapping")
    known = {f.name: f for f in dataclasses.fields(cls) if f.name not in _EXCLUDED.get(section, ())}
    for key in data:
        if key not in known:
            raise ConfigError(f"unknown key: {section}.{key}")
    defaults = cls()
    kwargs = {}
    for key, value in data.items():
        f = known[key]
        kwargs[key] = _check_type(f"{section}.{key}", value, getattr(defaults, key), str(f.type))
    try:
        return cls(**kwargs)
    except ValueError as exc:
        msg = str(exc)
        if msg.startswith("invariant violation: "):
            key = msg.split(": ", 1)[1]
            raise ConfigError(f"{msg} (at {section}.{key})") from None
        raise ConfigError(f"{section}: {msg}") from None


def config_from_dict(data: dict | None) -> RunConfig:
    data = {} if data is None else data
    if not isinstance(data, dict):
        raise ConfigError("invalid type at top level: expected mapping")
    top = {f.name for f in dataclasses.fields(RunConfig)}
    for key in data:
        if key not in top:
            raise ConfigError(f"unknown key: {key}")
    kwargs = {}
    defaults = RunConfig()
    for key in ("mode", "predictor", "seed", "out"):
        if key in data:
            kwargs[key] = _check_type(key, data[key], getattr(defaults, key), "")
    for section, cls in _SECTIONS.items():
        kwargs[section] = _build(cls, data.get(section), section)
    try:
        return RunConfig(**kwargs)
    except ConfigError as exc:
        key = str(exc).split(": ", 1)[1]
        raise ConfigError(f"{exc} (at {key})") from None


def loads_config(text: str) -> RunConfig:
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"parse failure: {exc}") from None
    return config_from_dict(data)


def load_config(path) -> RunConfig:
    """Read a YAML run configuration; raises ``OSError`` when unreadable."""
    return loads_config(Path(path).read_text())


def dumps_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=True, default_flow_style=False)


def save_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(dumps_config(cfg))
