"""Flat ``key = value`` configuration files.

A config file is plain UTF-8 text with one assignment per line. ``#`` and
``;`` start comments, blank lines are ignored and there are no sections.
Tuples are written as comma-separated values (``cost_a = 0, 1, 5, 100``).
"""
from __future__ import annotations

import configparser
import dataclasses
import typing
from pathlib import Path
from typing import Any, Mapping

_SECTION = "impomdp"


class ConfigError(ValueError):
    """Raised for unreadable files, unknown keys or unparsable values."""


def read_config(path: str | Path) -> dict[str, str]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text)


def parse_config(text: str) -> dict[str, str]:
    parser = configparser.ConfigParser(
        delimiters=("=",), comment_prefixes=("#", ";"), inline_comment_prefixes=("#",), interpolation=None
    )
    parser.optionxform = str  # keep key case
    try:
        parser.read_string(f"[{_SECTION}]\n" + text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from exc
    return dict(parser[_SECTION])


def _convert(raw: str, target: Any, key: str) -> Any:
    origin = typing.get_origin(target)
    args = typing.get_args(target)
    try:
        if target is bool:
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if target is int:
            return int(float(raw)) if "e" in raw.lower() else int(raw)
        if target is float:
            return float(raw)
        if target is str:
            return raw.strip()
        if origin is tuple:
            item = args[0] if args else float
            parts = [p for p in raw.replace(";", ",").split(",") if p.strip()]
            return tuple(_convert(p.strip(), item, key) for p in parts)
        if origin is typing.Union or str(origin) == "types.UnionType":
            if raw.strip().lower() in ("", "none", "null"):
                return None
            inner = [a for a in args if a is not type(None)][0]
            return _convert(raw, inner, key)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad value for {key!r}: {raw!r}") from exc
    raise ConfigError(f"unsupported field type for {key!r}: {target!r}")


def dataclass_from_mapping(cls, mapping: Mapping[str, str], prefix: str = "", strict: bool = False):
    """Build ``cls`` from string values, converting by the field annotations.

    Keys are matched as ``prefix + field_name``. With ``strict`` any key that
    carries the prefix but names no field is an error.
    """
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls) if f.init}
    kwargs = {}
    for key, raw in mapping.items():
        if not key.startswith(prefix):
            continue
        name = key[len(prefix):]
        if name not in names:
            if strict:
                raise ConfigError(f"unknown config key {key!r}")
            continue
        kwargs[name] = _convert(raw, hints[name], key)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def dataclass_to_lines(obj, prefix: str = "") -> list[str]:
    lines = []
    for f in dataclasses.fields(obj):
        value = getattr(obj, f.name)
        if isinstance(value, tuple):
            value = ", ".join(repr(v) for v in value)
        elif value is None:
            value = "none"
        lines.append(f"{prefix}{f.name} = {value}")
    return lines
