"""Dataclass <-> plain-dict conversion with strict key checking.

Configs, phantom specs and checkpoint headers are frozen dataclasses; on disk
they are JSON (or TOML) objects. ``from_dict`` rejects unknown keys and names
the dotted path of the first offending key.
"""

from __future__ import annotations

import dataclasses
import typing
from typing import Any, Dict, Type, TypeVar, Union

from tagstrain.errors import ConfigError

T = TypeVar("T")


def to_dict(obj: Any) -> Any:
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        return {f.name: to_dict(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [to_dict(v) for v in obj]
    if isinstance(obj, dict):
        return {str(k): to_dict(v) for k, v in obj.items()}
    return obj


def _is_namedtuple(tp: Any) -> bool:
    return isinstance(tp, type) and issubclass(tp, tuple) and hasattr(tp, "_fields")


def _convert(tp: Any, value: Any, path: str) -> Any:
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)

    if origin is Union:
        if value is None and type(None) in args:
            return None
        candidates = [a for a in args if a is not type(None)]
        last_error = None
        for candidate in candidates:
            try:
                return _convert(candidate, value, path)
            except ConfigError as exc:
                last_error = exc
        raise last_error or ConfigError(f"{path}: unsupported value {value!r}")

    if dataclasses.is_dataclass(tp):
        if dataclasses.is_dataclass(value) and isinstance(value, tp):
            return value
        if not isinstance(value, dict):
            raise ConfigError(f"{path}: expected a table/object, got {type(value).__name__}")
        return from_dict(tp, value, path)

    if _is_namedtuple(tp):
        if not isinstance(value, (list, tuple)) or len(value) != len(tp._fields):
            raise ConfigError(f"{path}: expected {len(tp._fields)} values, got {value!r}")
        hints = typing.get_type_hints(tp)
        return tp(*(_convert(hints[name], v, f"{path}[{i}]") for i, (name, v) in enumerate(zip(tp._fields, value))))

    if origin in (tuple, list):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path}: expected a list, got {type(value).__name__}")
        if origin is tuple and len(args) == 2 and args[1] is Ellipsis:
            items = [_convert(args[0], v, f"{path}[{i}]") for i, v in enumerate(value)]
        elif origin is tuple and args:
            if len(args) != len(value):
                raise ConfigError(f"{path}: expected {len(args)} values, got {len(value)}")
            items = [_convert(a, v, f"{path}[{i}]") for i, (a, v) in enumerate(zip(args, value))]
        else:
            inner = args[0] if args else Any
            items = [_convert(inner, v, f"{path}[{i}]") for i, v in enumerate(value)]
        return tuple(items) if origin is tuple else items

    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false, got {value!r}")
        return value
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    return value


def from_dict(cls: Type[T], data: Dict[str, Any], path: str = "") -> T:
    if not isinstance(data, dict):
        raise ConfigError(f"{path or '<root>'}: expected a table/object, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    known = {f.name for f in dataclasses.fields(cls) if f.init}
    for key in data:
        if key not in known:
            dotted = f"{path}.{key}" if path else key
            raise ConfigError(f"unknown config key: {dotted}")
    kwargs = {}
    for key, value in data.items():
        dotted = f"{path}.{key}" if path else key
        kwargs[key] = _convert(hints[key], value, dotted)
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError, RuntimeError) as exc:
        raise ConfigError(f"{path or '<root>'}: {exc}") from exc
