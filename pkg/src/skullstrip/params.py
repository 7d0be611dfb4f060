"""Flat ``key=value`` text files backing every config record.

Blank lines and ``#`` comments are ignored.  Values are coerced to the type
of the matching dataclass field; unknown keys are an error so that typos in
parameter files do not go unnoticed.
"""
from __future__ import annotations

import dataclasses
import typing
from pathlib import Path

from .errors import ParamsError


def parse_kv(text: str) -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParamsError(f"line {lineno}: expected key=value, got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ParamsError(f"line {lineno}: empty key")
        out[key] = value
    return out


def format_kv(values: dict) -> str:
    return "".join(f"{k}={_fmt(v)}\n" for k, v in values.items())


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if v is None:
        return "none"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (tuple, list)):
        return ",".join(_fmt(x) for x in v)
    return str(v)


def _coerce(raw: str, tp, key: str):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin is typing.Union or type(tp).__name__ == "UnionType":
        if raw.lower() in ("none", ""):
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(raw, inner[0], key)
    try:
        if tp is bool:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if tp is int:
            return int(raw)
        if tp is float:
            return float(raw)
        if tp is str:
            return raw
        if origin is tuple:
            parts = [p for p in raw.split(",") if p.strip()]
            return tuple(_coerce(p.strip(), args[0], key) for p in parts)
    except ValueError as exc:
        raise ParamsError(f"{key}: cannot read {raw!r} as {getattr(tp, '__name__', tp)}") from exc
    raise ParamsError(f"{key}: unsupported field type {tp}")


def from_kv(cls, values: dict[str, str]):
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls) if f.init}
    unknown = set(values) - names
    if unknown:
        raise ParamsError(f"unknown keys for {cls.__name__}: {sorted(unknown)}")
    kwargs = {k: _coerce(v, hints[k], k) for k, v in values.items()}
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ParamsError(str(exc)) from exc


def load(cls, path):
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ParamsError(f"cannot read {path}: {exc}") from exc
    return from_kv(cls, parse_kv(text))


def dump(obj, path=None) -> str:
    text = format_kv(dataclasses.asdict(obj))
    if path is not None:
        Path(path).write_text(text)
    return text
