"""Flat ``key=value`` config text: one key per line, ``#`` comments, unknown keys rejected."""

from __future__ import annotations

from pathlib import Path

from .errors import ConfigError

_TRUE = {"true", "1", "yes", "on"}
_FALSE = {"false", "0", "no", "off"}


def format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        return ",".join(str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def parse_value(key: str, text: str, typ: type):
    text = text.strip()
    try:
        if typ is bool:
            low = text.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(text)
        if typ is tuple:
            return tuple(int(t) for t in text.replace(" ", "").split(",") if t)
        if typ is int:
            return int(text)
        if typ is float:
            return float(text)
        return text
    except ValueError:
        raise ConfigError(key, f"cannot parse {text!r} as {typ.__name__}") from None


def parse_flat(text: str, types: dict[str, type]) -> dict:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}", f"expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise ConfigError(key, "unknown config key")
        out[key] = parse_value(key, value, types[key])
    return out


def load_config_file(path, types: dict[str, type]) -> dict:
    return parse_flat(Path(path).read_text(), types)


def dump_flat(values: dict) -> str:
    return "".join(f"{k}={format_value(v)}\n" for k, v in sorted(values.items()))
