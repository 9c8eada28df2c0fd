"""Flat ``key = value`` configuration files."""
from __future__ import annotations

from dataclasses import fields
from pathlib import Path

from ..model import ModelConfig
from ..training import TrainConfig

# desk-scale values applied before any config file or flag
DESK_DEFAULTS = {"v_dim": 64, "d": 32, "h": 64, "n_merges": 200, "batch_size": 32,
                 "rl_samples": 5}

HARNESS_KEYS = {"n_merges": int, "n_examples": int, "seed": int}


class ConfigError(ValueError):
    pass


def parse_config_text(text: str) -> dict:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        values[key] = val
    return values


def format_config(values: dict) -> str:
    return "".join(f"{k} = {str(v).lower() if isinstance(v, bool) else v}\n" for k, v in values.items())


def known_keys() -> set:
    return ({f.name for f in fields(ModelConfig)} | {f.name for f in fields(TrainConfig)}
            | set(HARNESS_KEYS))


def load_config_file(path) -> dict:
    values = parse_config_text(Path(path).read_text(encoding="utf-8"))
    unknown = set(values) - known_keys()
    if unknown:
        raise ConfigError(f"{path}: unknown keys {sorted(unknown)}")
    return values


def resolve(file_values: dict | None = None, overrides: dict | None = None, desk: bool = True) -> dict:
    """Merge desk defaults, file values and explicit overrides (in that order)."""
    merged = dict(DESK_DEFAULTS) if desk else {}
    merged.update(file_values or {})
    merged.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return merged


def model_config(values: dict, **extra) -> ModelConfig:
    try:
        return ModelConfig.from_dict({**values, **extra})
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid model configuration: {exc}") from None


def train_config(values: dict) -> TrainConfig:
    try:
        return TrainConfig.from_dict(values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid training configuration: {exc}") from None
