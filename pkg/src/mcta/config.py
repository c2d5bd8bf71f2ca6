"""Flat ``key = value`` configuration, layered defaults < file < flags.

Nested dataclasses flatten to dotted keys (``embedding.pool1 = 2,8``).
Unknown keys are rejected so that typos never silently fall back to a
default.
"""

from __future__ import annotations

import dataclasses
import enum
import hashlib
import json
import types
import typing
from pathlib import Path
from typing import Any, Mapping

from mcta.errors import InvalidInputError, ParseError


def flatten(obj, prefix: str = "") -> dict[str, Any]:
    out: dict[str, Any] = {}
    for f in dataclasses.fields(obj):
        value = getattr(obj, f.name)
        key = f"{prefix}{f.name}"
        if dataclasses.is_dataclass(value):
            out.update(flatten(value, key + "."))
        else:
            out[key] = value
    return out


def format_value(value: Any) -> str:
    if isinstance(value, enum.Enum):
        return str(value.value)
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ",".join(format_value(v) for v in value)
    if value is None:
        return "none"
    return str(value)


def _coerce(text: str, tp, key: str):
    text = text.strip()
    origin = typing.get_origin(tp)
    if origin is typing.Union or origin is types.UnionType:
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        if text.lower() in ("none", ""):
            return None
        return _coerce(text, args[0], key)
    if origin is tuple:
        args = typing.get_args(tp)
        parts = [p for p in text.split(",") if p.strip()]
        inner = args[0]
        return tuple(_coerce(p, inner, key) for p in parts)
    if isinstance(tp, type) and issubclass(tp, enum.Enum):
        try:
            return tp(text.lower())
        except ValueError:
            choices = ", ".join(m.value for m in tp)
            raise InvalidInputError(f"{key}: {text!r} is not one of {choices}") from None
    if tp is bool:
        if text.lower() in ("1", "true", "yes", "on"):
            return True
        if text.lower() in ("0", "false", "no", "off"):
            return False
        raise InvalidInputError(f"{key}: expected a boolean, got {text!r}")
    try:
        return tp(text)
    except (TypeError, ValueError):
        raise InvalidInputError(f"{key}: cannot parse {text!r} as {getattr(tp, '__name__', tp)}") from None


def apply_overrides(obj, overrides: Mapping[str, Any]):
    """Return a copy of dataclass ``obj`` with dotted-key overrides applied.

    String values are parsed according to the field's annotation; other
    values are used as given.
    """
    hints = typing.get_type_hints(type(obj))
    nested: dict[str, dict[str, Any]] = {}
    direct: dict[str, Any] = {}
    names = {f.name for f in dataclasses.fields(obj)}
    for key, value in overrides.items():
        head, _, rest = key.partition(".")
        if head not in names:
            raise InvalidInputError(f"unknown config key {key!r}")
        if rest:
            if not dataclasses.is_dataclass(getattr(obj, head)):
                raise InvalidInputError(f"unknown config key {key!r}")
            nested.setdefault(head, {})[rest] = value
        else:
            if dataclasses.is_dataclass(getattr(obj, head)):
                raise InvalidInputError(f"config key {key!r} names a section, not a value")
            direct[head] = _coerce(value, hints[head], key) if isinstance(value, str) else value
    for head, sub in nested.items():
        direct[head] = apply_overrides(getattr(obj, head), sub)
    return dataclasses.replace(obj, **direct)


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    values: dict[str, str] = {}
    for n, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise ParseError(f"{source}:{n}: expected 'key = value', got {raw!r}")
        key = key.strip()
        if key in values:
            raise ParseError(f"{source}:{n}: duplicate key {key!r}")
        values[key] = value.strip()
    return values


def read_config_file(path) -> dict[str, str]:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ParseError(f"cannot read config {path}: {exc}") from exc
    return parse_config_text(text, str(path))


def dump_config(obj) -> str:
    return "".join(f"{k} = {format_value(v)}\n" for k, v in flatten(obj).items())


def config_hash(*objs) -> str:
    payload = json.dumps([{k: format_value(v) for k, v in flatten(o).items()} for o in objs], sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()[:16]
