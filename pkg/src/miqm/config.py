"""Flat ``key = value`` run configuration files.

One setting per line, UTF-8, ``#`` starts a comment, blank lines ignored.
Keys use the long flag names with dashes or underscores interchangeably
(``data-root`` == ``data_root``). Values are strings; the CLI converts them
with the same types as the matching flag.
"""

from __future__ import annotations

from pathlib import Path
from typing import Any, Mapping


class ConfigError(ValueError):
    pass


def normalize_key(key: str) -> str:
    return key.strip().lstrip("-").replace("-", "_")


def parse_config(text: str, source: str = "<config>") -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = line.split("=", 1)
        key = normalize_key(key)
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        if key in out:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = value.strip()
    return out


def read_config(path: str | Path) -> dict[str, str]:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return parse_config(path.read_text(encoding="utf-8"), str(path))


def format_value(value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (list, tuple)):
        return ",".join(format_value(v) for v in value)
    return str(value)


def dump_config(values: Mapping[str, Any], header: str = "") -> str:
    lines = [f"# {h}" for h in header.splitlines()] if header else []
    for key in sorted(values):
        lines.append(f"{key} = {format_value(values[key])}")
    return "\n".join(lines) + "\n"


def write_config(path: str | Path, values: Mapping[str, Any], header: str = "") -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dump_config(values, header), encoding="utf-8")
    return path


def parse_bool(text: str) -> bool:
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off", ""):
        return False
    raise ConfigError(f"not a boolean: {text!r}")
