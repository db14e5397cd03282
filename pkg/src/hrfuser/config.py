"""Flat ``key = value`` configuration files.

One setting per line; ``#`` starts a comment; blank lines are ignored.
Lists are comma separated (``modalities = camera, lidar, radar``) and
booleans are ``true``/``false``.  The same keys are accepted as
``key=value`` command-line overrides.
"""

from __future__ import annotations

import dataclasses
import typing

from .tensor import ConfigError

_TRUE = {"true", "yes", "on", "1"}
_FALSE = {"false", "no", "off", "0"}


def parse_text(text: str, source: str = "<config>") -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        out[key] = value
    return out


def load(path) -> dict[str, str]:
    try:
        with open(path, encoding="utf-8") as fh:
            return parse_text(fh.read(), str(path))
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc


def apply_overrides(settings: dict[str, str], overrides) -> dict[str, str]:
    merged = dict(settings)
    for item in overrides or ():
        merged.update(parse_text(item, "<override>"))
    return merged


def dump(values: dict) -> str:
    lines = []
    for key, value in values.items():
        if isinstance(value, bool):
            text = "true" if value else "false"
        elif isinstance(value, (list, tuple)):
            text = ", ".join(str(v) for v in value)
        else:
            text = str(value)
        lines.append(f"{key} = {text}")
    return "\n".join(lines) + "\n"


def _convert(key: str, value, hint):
    if not isinstance(value, str):
        return value
    origin = typing.get_origin(hint)
    try:
        if hint is bool:
            low = value.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(value)
        if hint is int:
            return int(value)
        if hint is float:
            return float(value)
        if hint is str:
            return value
        if origin is tuple:
            (item_type, *_) = typing.get_args(hint)
            items = [v.strip() for v in value.split(",") if v.strip()]
            return tuple(_convert(key, v, item_type) for v in items)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key!r}: {value!r}") from exc
    raise ConfigError(f"unsupported setting type for {key!r}")


def build(cls, settings: dict, strict: bool = True):
    """Instantiate dataclass ``cls`` from string (or typed) settings."""
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(settings) - names
    if strict and unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    kwargs = {k: _convert(k, v, hints[k]) for k, v in settings.items() if k in names}
    return cls(**kwargs)


def split(settings: dict, *classes) -> list:
    """Route each key to the dataclass that declares it; leftovers are an error."""
    remaining = dict(settings)
    built = []
    for cls in classes:
        names = {f.name for f in dataclasses.fields(cls)}
        built.append(build(cls, {k: v for k, v in remaining.items() if k in names}))
        remaining = {k: v for k, v in remaining.items() if k not in names}
    if remaining:
        raise ConfigError(f"unknown configuration keys: {sorted(remaining)}")
    return built
