"""Flat ``key=value`` config files for dataclass configs."""

from __future__ import annotations

import dataclasses
from typing import Any, Mapping


class ConfigFileError(ValueError):
    pass


def parse_flat(text: str) -> dict[str, str]:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigFileError(f"line {lineno}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in out:
            raise ConfigFileError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def _coerce(value: Any, kind: type) -> Any:
    if not isinstance(value, str):
        return kind(value)
    if kind is bool:
        low = value.lower()
        if low in ("1", "true", "on", "yes"):
            return True
        if low in ("0", "false", "off", "no"):
            return False
        raise ConfigFileError(f"not a boolean: {value!r}")
    return kind(value)


def field_types(cls) -> dict[str, type]:
    hints = {"int": int, "float": float, "str": str, "bool": bool}
    out = {}
    for f in dataclasses.fields(cls):
        t = f.type if isinstance(f.type, type) else hints[str(f.type)]
        out[f.name] = t
    return out


def from_flat(cls, values: Mapping[str, Any], strict: bool = True):
    """Build ``cls`` from string or typed values; unknown keys are rejected."""
    types = field_types(cls)
    unknown = set(values) - set(types)
    if strict and unknown:
        raise ConfigFileError(f"unknown config keys: {sorted(unknown)}")
    kwargs = {}
    for key, value in values.items():
        if key not in types:
            continue
        try:
            kwargs[key] = _coerce(value, types[key])
        except (TypeError, ValueError) as exc:
            raise ConfigFileError(f"bad value for {key}: {value!r} ({exc})") from None
    return cls(**kwargs)


def format_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    return repr(value) if isinstance(value, float) else str(value)


def to_flat(obj) -> str:
    return "".join(f"{f.name}={format_value(getattr(obj, f.name))}\n" for f in dataclasses.fields(obj))
