"""Experiment configuration: defaults, TOML files and dotted ``key=value`` overrides.

Precedence is command line over file over defaults.  Every leaf of
:class:`~flatmatch.trainers.TrainConfig` is addressable by its dotted path,
e.g. ``flatmatch.rho`` or ``data.labels_per_class``.
"""

from __future__ import annotations

import dataclasses
import typing
from pathlib import Path
from typing import Any, Iterable

import tomli

from .errors import ConfigError
from .trainers import TrainConfig


def _hints(cls) -> dict[str, Any]:
    return typing.get_type_hints(cls)


def _is_dataclass_type(tp) -> bool:
    return isinstance(tp, type) and dataclasses.is_dataclass(tp)


def _coerce(value, tp, path: str):
    """Check ``value`` against the annotated type, allowing int -> float and list -> tuple."""
    origin = typing.get_origin(tp)
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"expected true/false, got {value!r}", path)
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"expected an integer, got {value!r}", path)
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"expected a number, got {value!r}", path)
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"expected a string, got {value!r}", path)
        return value
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"expected a list, got {value!r}", path)
        (item,) = {a for a in typing.get_args(tp) if a is not Ellipsis}
        return tuple(_coerce(v, item, f"{path}[{i}]") for i, v in enumerate(value))
    if origin is typing.Union or str(origin) == "types.UnionType":
        for arg in typing.get_args(tp):
            try:
                return _coerce(value, arg, path)
            except ConfigError:
                continue
        raise ConfigError(f"unsupported value {value!r}", path)
    raise ConfigError(f"cannot set a field of type {tp}", path)


def _build(cls, table: dict, prefix: str = ""):
    hints = _hints(cls)
    names = {f.name for f in dataclasses.fields(cls) if f.init and not f.name.startswith("_")}
    unknown = sorted(set(table) - names)
    if unknown:
        raise ConfigError("unknown key", prefix + unknown[0])
    kwargs = {}
    for name, value in table.items():
        path = prefix + name
        tp = hints[name]
        if _is_dataclass_type(tp):
            if not isinstance(value, dict):
                raise ConfigError("expected a table", path)
            kwargs[name] = _build(tp, value, path + ".")
        else:
            kwargs[name] = _coerce(value, tp, path)
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc), prefix.rstrip(".") or None) from exc


def _merge(base: dict, update: dict) -> dict:
    out = dict(base)
    for k, v in update.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def parse_value(text: str):
    """TOML literal if it parses (``0.1``, ``true``, ``[64, 64]``), else the bare string."""
    try:
        return tomli.loads(f"v = {text}")["v"]
    except tomli.TOMLDecodeError:
        return text


def parse_override(item: str) -> tuple[str, Any]:
    key, sep, raw = item.partition("=")
    key = key.strip()
    if not sep or not key:
        raise ConfigError(f"override {item!r} is not of the form key=value")
    return key, parse_value(raw.strip())


def _nest(key: str, value) -> dict:
    table: dict = {}
    node = table
    parts = key.split(".")
    for p in parts[:-1]:
        node = node.setdefault(p, {})
    node[parts[-1]] = value
    return table


def read_toml(path: str | Path) -> dict:
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            return tomli.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file {path} not found") from exc
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def build_config(table: dict | None = None, overrides: Iterable[str] = ()) -> TrainConfig:
    """Resolve a config table plus ``key=value`` overrides into a validated :class:`TrainConfig`."""
    merged = dict(table or {})
    for item in overrides:
        key, value = parse_override(item)
        merged = _merge(merged, _nest(key, value))
    return _build(TrainConfig, merged).validate()


def load_config(path: str | Path | None = None, overrides: Iterable[str] = ()) -> TrainConfig:
    return build_config(read_toml(path) if path is not None else {}, overrides)


def config_to_dict(cfg: TrainConfig) -> dict:
    """Plain nested dict (tuples become lists), suitable for JSON."""

    def plain(v):
        if isinstance(v, dict):
            return {k: plain(x) for k, x in v.items()}
        if isinstance(v, (list, tuple)):
            return [plain(x) for x in v]
        return v

    return plain(dataclasses.asdict(cfg))
