"""Plain ``key = value`` run configuration and named random sub-streams."""

from __future__ import annotations

import dataclasses
import zlib
from pathlib import Path

import numpy as np

from .errors import InputError

STREAMS = ("data", "init", "holes", "eval")


def parse_config_file(path) -> dict[str, str]:
    """Read ``section.key = value`` lines; blank lines and ``#`` comments are skipped."""
    out = {}
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise InputError(f"{path}: cannot read config ({exc})") from exc
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InputError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise InputError(f"{path}:{lineno}: empty key")
        out[key] = value
    return out


def _coerce(text: str, current, key: str):
    try:
        if isinstance(current, bool):
            low = text.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return low in ("true", "1", "yes")
        if isinstance(current, int):
            return int(text)
        if isinstance(current, float):
            return float(text)
        if isinstance(current, tuple):
            items = [t.strip() for t in text.split(",") if t.strip()]
            kind = type(current[0]) if current else str
            return tuple(kind(t) for t in items)
        return text
    except ValueError as exc:
        raise InputError(f"config key {key!r}: cannot parse {text!r} as {type(current).__name__}") from exc


def apply_overrides(obj, values: dict[str, str], prefix: str = ""):
    """Return a copy of dataclass ``obj`` with dotted keys applied recursively.

    Keys that name no field raise InputError.
    """
    fields = {f.name for f in dataclasses.fields(obj)}
    direct, nested = {}, {}
    for key, value in values.items():
        head, _, rest = key.partition(".")
        if head not in fields:
            raise InputError(f"unknown config key {prefix + key!r}")
        if rest:
            nested.setdefault(head, {})[rest] = value
        else:
            direct[head] = value
    changes = {}
    for name, value in direct.items():
        current = getattr(obj, name)
        if dataclasses.is_dataclass(current):
            raise InputError(f"config key {prefix + name!r} is a section, not a value")
        changes[name] = _coerce(value, current, prefix + name)
    for name, sub in nested.items():
        current = getattr(obj, name)
        if not dataclasses.is_dataclass(current):
            raise InputError(f"config key {prefix + name!r} has no sub-keys")
        changes[name] = apply_overrides(current, sub, prefix + name + ".")
    return dataclasses.replace(obj, **changes)


def flatten(obj, prefix: str = "") -> list[tuple[str, str]]:
    out = []
    for f in dataclasses.fields(obj):
        value = getattr(obj, f.name)
        if dataclasses.is_dataclass(value):
            out += flatten(value, prefix + f.name + ".")
        elif isinstance(value, tuple):
            out.append((prefix + f.name, ",".join(map(str, value))))
        else:
            out.append((prefix + f.name, str(value)))
    return out


def format_config(obj) -> str:
    return "".join(f"{k} = {v}\n" for k, v in flatten(obj))


def stream_seed(seed: int, name: str) -> int:
    """Independent, reproducible 32-bit seed for a named sub-stream."""
    if name not in STREAMS:
        raise ValueError(f"unknown random stream {name!r}; expected one of {STREAMS}")
    ss = np.random.SeedSequence([seed, zlib.crc32(name.encode())])
    return int(ss.generate_state(1, dtype=np.uint32)[0])


def stream(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng(stream_seed(seed, name))
