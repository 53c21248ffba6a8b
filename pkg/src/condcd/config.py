"""Flat ``key = value`` configuration files mapped onto nested dataclasses.

Dotted keys address nested dataclass fields (``fusion.K = 6``). ``#`` starts
a comment. Overrides (``--set key=value``) are applied after the file.
"""
from __future__ import annotations

import dataclasses
import hashlib
from pathlib import Path
from typing import Any, Iterable, List, Optional, Tuple, get_type_hints


class ConfigError(ValueError):
    def __init__(self, message: str, line: Optional[int] = None, source: str = "config"):
        self.line = line
        where = f"{source}:{line}: " if line is not None else f"{source}: "
        super().__init__(where + message)


def _fields(cls) -> dict:
    hints = get_type_hints(cls)
    return {f.name: (f, hints[f.name]) for f in dataclasses.fields(cls)
            if not f.metadata.get("internal")}


def _convert(text: str, typ, key: str):
    origin = getattr(typ, "__origin__", None)
    text = text.strip()
    if typ is bool:
        low = text.lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ValueError(f"{key}: expected a boolean, got {text!r}")
    if typ in (int, float):
        try:
            return int(text, 0) if typ is int else float(text)
        except ValueError:
            raise ValueError(f"{key}: expected {typ.__name__}, got {text!r}") from None
    if typ is str:
        return text.strip('"')
    if origin in (tuple, Tuple):
        inner = typ.__args__[0]
        return tuple(_convert(p, inner, key) for p in text.split(",") if p.strip())
    raise ValueError(f"{key}: unsupported field type {typ}")


def set_key(obj, key: str, raw: str) -> None:
    parts = key.split(".")
    target = obj
    for i, part in enumerate(parts):
        fields = _fields(type(target))
        if part not in fields:
            path = ".".join(parts[:i + 1])
            raise KeyError(f"unknown key {path!r}")
        f, typ = fields[part]
        if i == len(parts) - 1:
            if dataclasses.is_dataclass(typ):
                raise KeyError(f"{key!r} names a section, not a value")
            setattr(target, part, _convert(raw, typ, key))
        else:
            if not dataclasses.is_dataclass(typ):
                raise KeyError(f"{'.'.join(parts[:i + 1])!r} is not a section")
            target = getattr(target, part)


def _split(line: str) -> Optional[Tuple[str, str]]:
    line = line.split("#", 1)[0].strip()
    if not line:
        return None
    if "=" not in line:
        raise ValueError("expected 'key = value'")
    k, v = line.split("=", 1)
    return k.strip(), v.strip()


def parse_config(cls, path=None, overrides: Iterable[str] = (), text: Optional[str] = None):
    """Build and validate a ``cls`` instance from a file (or text) plus overrides."""
    cfg = cls()
    source = str(path) if path is not None else "config"
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except (OSError, UnicodeDecodeError) as exc:
            raise ConfigError(f"cannot read config: {exc}", source=source) from exc
    origin = {}
    for lineno, line in enumerate((text or "").splitlines(), start=1):
        try:
            kv = _split(line)
            if kv:
                set_key(cfg, *kv)
                origin[kv[0]] = (lineno, source)
        except (KeyError, ValueError) as exc:
            raise ConfigError(str(exc).strip("'\""), lineno, source) from exc
    for i, ov in enumerate(overrides, start=1):
        try:
            kv = _split(ov)
            if kv is None:
                raise ValueError("empty override")
            set_key(cfg, *kv)
            origin[kv[0]] = (i, "--set")
        except (KeyError, ValueError) as exc:
            raise ConfigError(str(exc).strip("'\""), i, "--set") from exc
    if hasattr(cfg, "validate"):
        try:
            cfg.validate()
        except ValueError as exc:
            line, src = _blame(str(exc), origin, source)
            raise ConfigError(f"constraint violated: {exc}", line, src) from exc
    return cfg


def _blame(message: str, origin: dict, default_source: str):
    """Line that set the field a validation message names, if any."""
    for key, (line, src) in sorted(origin.items(), key=lambda kv: -len(kv[0])):
        if f".{key.rsplit('.', 1)[-1]} " in message + " ":
            return line, src
    return None, default_source


def _fmt(v: Any) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(_fmt(x) for x in v)
    return str(v)


def flatten(cfg, prefix: str = "") -> List[Tuple[str, str]]:
    out = []
    for name, (f, typ) in _fields(type(cfg)).items():
        v = getattr(cfg, name)
        if dataclasses.is_dataclass(v):
            out.extend(flatten(v, f"{prefix}{name}."))
        else:
            out.append((f"{prefix}{name}", _fmt(v)))
    return out


def format_config(cfg) -> str:
    return "".join(f"{k} = {v}\n" for k, v in flatten(cfg))


def config_hash(cfg) -> str:
    return hashlib.sha256(format_config(cfg).encode("utf-8")).hexdigest()
