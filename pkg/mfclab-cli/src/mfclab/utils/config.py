"""
YAML configuration helpers.

Sections map onto frozen dataclasses. Unknown keys are rejected with the full
key path so typos never silently fall back to defaults.
"""

import dataclasses
import os
from typing import Any, Mapping

import yaml

from mfclab.utils.errors import ConfigError


def load_yaml(path: str) -> dict:
    if not os.path.exists(path):
        raise ConfigError(f"Config file not found: {path}")
    with open(path, "r", encoding="utf-8") as f:
        try:
            data = yaml.safe_load(f)
        except yaml.YAMLError as e:
            raise ConfigError(f"Config file {path} is not valid YAML: {e}") from e
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"Config file {path} must contain a mapping at the top level")
    return data


def build_section(cls, raw: Mapping[str, Any] | None, path: str):
    """Instantiates dataclass ``cls`` from ``raw``, rejecting keys it does not declare."""
    if raw is None:
        raw = {}
    if not isinstance(raw, Mapping):
        raise ConfigError(f"Section '{path}' must be a mapping, got {type(raw).__name__}")

    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"Unknown key(s) in '{path}': {', '.join(path + '.' + k for k in unknown)}")

    kwargs = {}
    for key, value in raw.items():
        # Lists from YAML become tuples so the dataclasses stay hashable
        kwargs[key] = tuple(value) if isinstance(value, list) else value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"Invalid value in '{path}': {e}") from e


def dump_yaml(data: Mapping[str, Any], path: str):
    with open(path, "w", encoding="utf-8") as f:
        yaml.safe_dump(dict(data), f, sort_keys=False)
