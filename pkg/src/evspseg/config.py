"""Flat ``key=value`` configuration files mapped onto dataclasses."""

from __future__ import annotations

import dataclasses
import typing
from pathlib import Path


class ConfigError(ValueError):
    pass


def parse_kv_lines(lines, source="<config>"):
    out = {}
    for lineno, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {raw.strip()!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def read_kv(path):
    path = Path(path)
    return parse_kv_lines(path.read_text().splitlines(), str(path))


def format_value(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ",".join(format_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _coerce(text, hint, key):
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    try:
        if origin is typing.Union:
            inner = [a for a in args if a is not type(None)]
            if text.lower() in ("", "none"):
                return None
            return _coerce(text, inner[0], key)
        if origin in (tuple, list):
            parts = [p for p in text.replace(" ", "").split(",") if p]
            elem = args[0] if args else str
            return tuple(_coerce(p, elem, key) for p in parts)
        if hint is bool:
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if hint is int:
            return int(float(text)) if "e" in text.lower() else int(text)
        if hint is float:
            return float(text)
        return text
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r} as {hint}") from None


def from_kv(cls, values, base=None):
    """Build dataclass ``cls`` from string values; unknown keys are rejected."""
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls) if f.init}
    unknown = sorted(set(values) - names)
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {', '.join(unknown)}")
    parsed = {k: _coerce(v, hints[k], k) for k, v in values.items()}
    if base is not None:
        return dataclasses.replace(base, **parsed)
    return cls(**parsed)


def to_kv(obj):
    return {f.name: format_value(getattr(obj, f.name)) for f in dataclasses.fields(obj) if f.init}


def write_kv(mapping, path):
    text = "".join(f"{k}={v}\n" for k, v in mapping.items())
    Path(path).write_text(text)
