"""key=value text for dataclass configs (config files and checkpoint headers)."""

from __future__ import annotations

import dataclasses
import typing

from .errors import ConfigError


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (tuple, list)):
        return ",".join(_format(v) for v in value)
    return str(value)


def _coerce(raw: str, hint, key: str):
    origin = typing.get_origin(hint)
    try:
        if hint is bool:
            low = raw.strip().lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if hint is int:
            return int(raw)
        if hint is float:
            return float(raw)
        if hint is str:
            return raw.strip()
        if origin is tuple:
            (inner, *_) = typing.get_args(hint)
            return tuple(_coerce(part, inner, key) for part in raw.split(",") if part.strip())
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {getattr(hint, '__name__', hint)}") from exc
    raise ConfigError(f"{key}: unsupported field type {hint}")


def to_lines(cfg, prefix: str = "") -> list[str]:
    return [f"{prefix}{f.name}={_format(getattr(cfg, f.name))}" for f in dataclasses.fields(cfg)]


def from_mapping(cls, values: dict, strict: bool = True):
    """Build ``cls`` from string values; unknown keys are rejected when ``strict``."""
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - names)
    if unknown and strict:
        raise ConfigError(f"unknown config keys for {cls.__name__}: {', '.join(unknown)}")
    kwargs = {k: _coerce(v, hints[k], k) if isinstance(v, str) else v
              for k, v in values.items() if k in names}
    return cls(**kwargs)


def parse_text(text: str) -> dict:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def read_file(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            return parse_text(fh.read())
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
