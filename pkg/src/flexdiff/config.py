"""Line-oriented configuration: `key = value` pairs under bracketed
sections, parsed against a typed schema. Unknown keys are hard errors so
misspellings cannot silently fall back to defaults. Precedence is
flags > config file > schema defaults.
"""

from __future__ import annotations

import hashlib


class ConfigError(ValueError):
    """Raised for unparseable files, unknown keys, or bad values."""


def parse_config_text(text: str) -> dict[str, str]:
    """Flat dict keyed "section.key" (or bare "key" before any section)."""
    out: dict[str, str] = {}
    section = ""
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            if not section:
                raise ConfigError(f"line {lineno}: empty section name")
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"line {lineno}: expected key = value")
        key = key.strip()
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        full = f"{section}.{key}" if section else key
        if full in out:
            raise ConfigError(f"line {lineno}: duplicate key {full!r}")
        out[full] = value.strip()
    return out


def load_config_file(path) -> dict[str, str]:
    try:
        with open(path, "r", encoding="utf-8") as f:
            return parse_config_text(f.read())
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from None


_PARSERS = {
    "str": lambda s: s,
    "int": int,
    "float": float,
}


def _parse_bool(s: str) -> bool:
    low = s.strip().lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _parse_ints(s: str) -> tuple[int, ...]:
    s = s.strip()
    if not s:
        return ()
    return tuple(int(p.strip()) for p in s.split(","))


_PARSERS["bool"] = _parse_bool
_PARSERS["ints"] = _parse_ints


def resolve(schema: dict[str, tuple[str, object]], file_values: dict[str, str],
            overrides: dict[str, object] | None = None) -> dict[str, object]:
    """Apply a {key: (type, default)} schema.

    file_values are raw strings from a config file; overrides are already
    typed (from CLI flags) and win. A default of None marks the key
    required. Keys outside the schema are refused."""
    out: dict[str, object] = {}
    for key, raw in file_values.items():
        if key not in schema:
            raise ConfigError(f"unknown config key {key!r}")
        kind = schema[key][0]
        try:
            out[key] = _PARSERS[kind](raw)
        except (ValueError, KeyError) as e:
            raise ConfigError(f"bad value for {key!r}: {e}") from None
    for key, value in (overrides or {}).items():
        if key not in schema:
            raise ConfigError(f"unknown override {key!r}")
        if value is not None:
            out[key] = value
    for key, (_, default) in schema.items():
        if key not in out:
            if default is None:
                raise ConfigError(f"missing required config key {key!r}")
            out[key] = default
    return out


def format_config_text(values: dict[str, object]) -> str:
    """Canonical emission: sorted sections, sorted keys, repr-exact floats."""
    by_section: dict[str, dict[str, object]] = {}
    for full, value in values.items():
        section, _, key = full.rpartition(".")
        by_section.setdefault(section, {})[key] = value
    lines = []
    for section in sorted(by_section):
        if section:
            lines.append(f"[{section}]")
        for key in sorted(by_section[section]):
            value = by_section[section][key]
            if isinstance(value, bool):
                text = "true" if value else "false"
            elif isinstance(value, (tuple, list)):
                text = ",".join(str(v) for v in value)
            elif isinstance(value, float):
                text = repr(value)
            else:
                text = str(value)
            lines.append(f"{key} = {text}")
        lines.append("")
    return "\n".join(lines)


def config_hash(values: dict[str, object]) -> str:
    return hashlib.sha256(format_config_text(values).encode()).hexdigest()
