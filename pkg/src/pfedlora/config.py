"""Flat ``key = value`` config files and run manifests.

Grammar: one ``key = value`` per line; ``#`` starts a comment; blank lines
are ignored. Keys are :class:`~pfedlora.federation.RunConfig` field names.
Booleans are ``true``/``false``, tuples are comma-separated integers (empty
for none), floats are written with ``repr`` so a manifest replays exactly.
"""

from __future__ import annotations

import typing
from dataclasses import fields
from pathlib import Path

from .exceptions import ConfigError, StorageError
from .federation import RunConfig

MANIFEST_HEADER = "# pfedlora run manifest v1"

_TYPES = {f.name: f.type for f in fields(RunConfig)}


def parse_value(key: str, text: str):
    if key not in _TYPES:
        raise ConfigError(f"unknown config key {key!r}")
    kind = _TYPES[key]
    text = text.strip()
    try:
        if kind == "bool":
            if text.lower() not in ("true", "false"):
                raise ValueError(text)
            return text.lower() == "true"
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
        if kind == "tuple":
            return tuple(int(v) for v in text.split(",") if v.strip())
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {text!r}") from exc
    return text


def format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return str(value)


def parse_lines(lines: typing.Iterable[str], source: str = "<config>") -> dict:
    out = {}
    for lineno, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = parse_value(key, value)
    return out


def read_config(path) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise StorageError(f"cannot read config {path}: {exc}") from exc
    return parse_lines(text.splitlines(), str(path))


def parse_overrides(items: typing.Iterable[str]) -> dict:
    return parse_lines(items, "--set")


def write_manifest(config: RunConfig, path) -> None:
    lines = [MANIFEST_HEADER]
    lines += [f"{f.name} = {format_value(getattr(config, f.name))}" for f in fields(RunConfig)]
    try:
        Path(path).write_text("\n".join(lines) + "\n")
    except OSError as exc:
        raise StorageError(f"cannot write manifest {path}: {exc}") from exc


def read_manifest(path) -> RunConfig:
    return RunConfig(**read_config(path))
