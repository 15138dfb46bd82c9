"""Flat key-value run configs.

One `key = value` pair per line, `#` comments. Unknown keys are hard
errors so typos never fall back to silent defaults; every run writes the
resolved config back next to its outputs for auditability.
"""
from __future__ import annotations

from pathlib import Path


class ConfigKeyError(ValueError):
    pass


def _parse_bool(raw: str) -> bool:
    low = raw.strip().lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise ConfigKeyError(f"not a boolean: {raw!r}")


def parse_config(path: Path | str, schema: dict[str, type]) -> dict:
    """Read and type-coerce a config file against a key -> type schema."""
    out: dict = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigKeyError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        key, raw = (part.strip() for part in stripped.split("=", 1))
        if key not in schema:
            raise ConfigKeyError(f"{path}:{lineno}: unknown config key {key!r}")
        if key in out:
            raise ConfigKeyError(f"{path}:{lineno}: duplicate key {key!r}")
        kind = schema[key]
        try:
            out[key] = _parse_bool(raw) if kind is bool else kind(raw)
        except ConfigKeyError:
            raise
        except ValueError as exc:
            raise ConfigKeyError(f"{path}:{lineno}: bad value for {key!r}: {exc}") from exc
    return out


def write_config(path: Path | str, values: dict) -> None:
    lines = [f"{key} = {value}" for key, value in sorted(values.items())]
    Path(path).write_text("\n".join(lines) + "\n")
