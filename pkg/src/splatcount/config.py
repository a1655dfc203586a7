"""Flat dotted-key config files: `section.key = value` per line, `#`
comments, blank lines ignored. Values stay strings here; consumers convert
with the typed helpers, and command-line flags always win over file values.
"""

from __future__ import annotations


class ConfigError(ValueError):
    """Raised for malformed config files or values."""


def parse_config_text(text: str, source: str = "<config>") -> dict:
    """Parse config text into an ordered {dotted key: raw string} dict."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', "
                              f"got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        # Allow a trailing comment after the value.
        value = value.split("#", 1)[0].strip()
        out[key] = value
    return out


def load_config(path) -> dict:
    with open(path, "r", encoding="utf-8") as f:
        return parse_config_text(f.read(), source=str(path))


def _convert(key: str, raw: str, kind):
    try:
        if kind is bool:
            lowered = raw.lower()
            if lowered in ("true", "1", "yes", "on"):
                return True
            if lowered in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        return kind(raw)
    except ValueError as exc:
        raise ConfigError(f"config key '{key}': cannot parse {raw!r} as "
                          f"{kind.__name__}") from exc


def get_value(flag_value, config: dict, key: str, kind, default):
    """Merge one setting: explicit flag > config file > default.

    Empty config values count as unset. `kind` of list produces a list of
    comma-separated strings.
    """
    if flag_value is not None:
        return flag_value
    raw = config.get(key)
    if raw is None or raw == "":
        return default
    if kind is list:
        return [t.strip() for t in raw.split(",") if t.strip()]
    if kind is str:
        return raw
    return _convert(key, raw, kind)
