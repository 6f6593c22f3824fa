"""Flat key=value config files for training runs.

One `key = value` pair per line; blank lines and #-comments are ignored. The file
key `lambda` maps to RunConfig.lambda_weight (the attribute can't use the reserved
word). Unknown keys and uncoercible values are configuration errors.
"""
from __future__ import annotations

import dataclasses
from pathlib import Path

from .errors import ConfigurationError
from .trainer import RunConfig

_FILE_KEY = {"lambda_weight": "lambda"}
_ATTR_KEY = {v: k for k, v in _FILE_KEY.items()}


def parse_key_values(text: str) -> dict[str, str]:
    pairs: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"line {lineno}: expected key = value, got {raw!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        if key in pairs:
            raise ConfigurationError(f"line {lineno}: duplicate key {key!r}")
        pairs[key] = value.strip()
    return pairs


def parse_run_config(text: str) -> RunConfig:
    fields = {f.name: f for f in dataclasses.fields(RunConfig)}
    kwargs = {}
    for key, value in parse_key_values(text).items():
        attr = _ATTR_KEY.get(key, key)
        if attr not in fields:
            raise ConfigurationError(f"unknown config key {key!r}")
        ftype = fields[attr].type
        try:
            if ftype == "int":
                kwargs[attr] = int(value)
            elif ftype == "float":
                kwargs[attr] = float(value)
            else:
                kwargs[attr] = value
        except ValueError as exc:
            raise ConfigurationError(f"config key {key!r}: {exc}") from exc
    config = RunConfig(**kwargs)
    config.validate()
    return config


def format_run_config(config: RunConfig) -> str:
    lines = []
    for f in dataclasses.fields(RunConfig):
        key = _FILE_KEY.get(f.name, f.name)
        lines.append(f"{key} = {getattr(config, f.name)!r}".replace("'", ""))
    return "\n".join(lines) + "\n"


def load_run_config(path: str | Path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"config file not found: {path}")
    return parse_run_config(path.read_text())


def save_run_config(config: RunConfig, path: str | Path) -> None:
    Path(path).write_text(format_run_config(config))
