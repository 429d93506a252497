"""Plain-text key=value run configuration.

Defaults come from TrainConfig, file values override defaults, and CLI flags
override file values. Unknown keys are rejected by name.
"""

from __future__ import annotations

import dataclasses
from pathlib import Path

from .models import ModelVariant
from .training import TrainConfig


class ConfigError(ValueError):
    pass


# run-level keys that live next to the TrainConfig fields in a config file
PATH_KEYS = ("data_dir", "run_dir")
FLAG_KEYS = ("quick",)

_FIELD_TYPES = {f.name: f.type for f in dataclasses.fields(TrainConfig)}


def _convert(key: str, raw: str):
    raw = raw.strip()
    if key in PATH_KEYS:
        return raw
    if key in FLAG_KEYS:
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ConfigError(f"config key {key!r} expects a boolean, got {raw!r}")
    if key == "variant":
        try:
            return ModelVariant(raw)
        except ValueError:
            choices = ", ".join(v.value for v in ModelVariant)
            raise ConfigError(f"unknown variant {raw!r} (choices: {choices})")
    if key not in _FIELD_TYPES:
        raise ConfigError(f"unknown config key {key!r}")
    kind = _FIELD_TYPES[key]
    try:
        if kind == "int" or kind is int:
            return int(raw)
        return float(raw)
    except ValueError:
        raise ConfigError(f"config key {key!r} expects a number, got {raw!r}")


def parse_config_file(path) -> dict:
    """Parse `key = value` lines; '#' starts a comment, blank lines ignored."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    values = {}
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        key, raw = (part.strip() for part in line.split("=", 1))
        values[key] = _convert(key, raw)
    return values


def resolve_config(file_path=None, overrides=None) -> tuple[TrainConfig, dict]:
    """Merge defaults <- config file <- CLI overrides.

    Returns the TrainConfig plus the run-level settings (data_dir, run_dir,
    quick). Overrides with value None mean "flag not given".
    """
    merged: dict = {}
    if file_path is not None:
        merged.update(parse_config_file(file_path))
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        merged[key] = _convert(key, str(value)) if isinstance(value, str) else value
    run_settings = {key: merged.pop(key, None) for key in PATH_KEYS}
    run_settings["quick"] = bool(merged.pop("quick", False))
    unknown = set(merged) - set(_FIELD_TYPES)
    if unknown:
        raise ConfigError(f"unknown config key {sorted(unknown)[0]!r}")
    try:
        cfg = TrainConfig(**merged)
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc))
    return cfg, run_settings
