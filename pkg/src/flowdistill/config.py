"""Flat dotted-key run configuration: one `key = value` per line.

Values are kept as strings until a typed accessor pulls them out, so the
resolved configuration can be echoed into manifests byte-for-byte.  Unknown
keys are rejected against the caller's default table; missing keys fall back
to the defaults.  `#` starts a comment, blank lines are skipped.
"""

from __future__ import annotations

from typing import Dict, Iterable, Mapping, Optional, Sequence, Tuple

from .errors import ConfigError

_TRUE = {"true", "1", "yes", "on"}
_FALSE = {"false", "0", "no", "off"}


def parse_config_text(text: str, source: str = "<config>") -> Dict[str, str]:
    """Parse `key = value` lines into an ordered dict of strings."""
    out: Dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = line.split("=", 1)
        key, value = key.strip(), value.strip()
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        if key in out:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def load_config(path) -> Dict[str, str]:
    with open(path, "r") as fh:
        return parse_config_text(fh.read(), source=str(path))


def apply_overrides(cfg: Dict[str, str], overrides: Iterable[str]) -> Dict[str, str]:
    """Apply repeatable `key=value` command-line overrides (last one wins)."""
    out = dict(cfg)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override must look like key=value, got {item!r}")
        key, value = item.split("=", 1)
        key = key.strip()
        if not key:
            raise ConfigError(f"override has an empty key: {item!r}")
        out[key] = value.strip()
    return out


def resolve(defaults: Mapping[str, str], given: Mapping[str, str]) -> Dict[str, str]:
    """Merge user keys over defaults; reject keys the defaults don't know.

    Keys under a namespace listed in OPEN_NAMESPACES are passed through
    unchecked (the teacher's mixture form takes data-dependent key sets).
    """
    unknown = [
        k
        for k in given
        if k not in defaults and k.split(".", 1)[0] not in OPEN_NAMESPACES
    ]
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
    out = dict(defaults)
    out.update(given)
    return out


# namespaces whose key set depends on the data they describe
OPEN_NAMESPACES = ("teacher",)


def format_config(cfg: Mapping[str, str]) -> str:
    """Canonical sorted `key = value` text (what manifests embed)."""
    return "\n".join(f"{k} = {cfg[k]}" for k in sorted(cfg)) + "\n"


def namespace(cfg: Mapping[str, str], prefix: str) -> Dict[str, str]:
    """All keys under `prefix.` with the prefix stripped."""
    dot = prefix + "."
    return {k[len(dot):]: v for k, v in cfg.items() if k.startswith(dot)}


# -- typed accessors ---------------------------------------------------------


def _raw(cfg: Mapping[str, str], key: str) -> str:
    if key not in cfg:
        raise ConfigError(f"missing config key {key!r}")
    return cfg[key]


def get_str(cfg: Mapping[str, str], key: str) -> str:
    return _raw(cfg, key)


def get_int(cfg: Mapping[str, str], key: str) -> int:
    v = _raw(cfg, key)
    try:
        return int(v)
    except ValueError:
        raise ConfigError(f"{key} must be an integer, got {v!r}") from None


def get_float(cfg: Mapping[str, str], key: str) -> float:
    v = _raw(cfg, key)
    try:
        return float(v)
    except ValueError:
        raise ConfigError(f"{key} must be a number, got {v!r}") from None


def get_bool(cfg: Mapping[str, str], key: str) -> bool:
    v = _raw(cfg, key).lower()
    if v in _TRUE:
        return True
    if v in _FALSE:
        return False
    raise ConfigError(f"{key} must be a boolean (true/false), got {cfg[key]!r}")


def get_floats(cfg: Mapping[str, str], key: str) -> Tuple[float, ...]:
    v = _raw(cfg, key)
    if not v.strip():
        return ()
    try:
        return tuple(float(p) for p in v.split(","))
    except ValueError:
        raise ConfigError(f"{key} must be comma-separated numbers, got {v!r}") from None


def get_ints(cfg: Mapping[str, str], key: str) -> Tuple[int, ...]:
    v = _raw(cfg, key)
    if not v.strip():
        return ()
    try:
        return tuple(int(p) for p in v.split(","))
    except ValueError:
        raise ConfigError(f"{key} must be comma-separated integers, got {v!r}") from None


def get_optional_float(cfg: Mapping[str, str], key: str) -> Optional[float]:
    if key not in cfg or not cfg[key].strip():
        return None
    return get_float(cfg, key)


def get_optional_str(cfg: Mapping[str, str], key: str) -> Optional[str]:
    if key not in cfg or not cfg[key].strip():
        return None
    return cfg[key].strip()


def parse_range(text: str) -> Tuple[float, float]:
    """A `lo,hi` pair, as used by --t-range and the ablation ranges."""
    parts = [p.strip() for p in text.split(",")]
    if len(parts) != 2:
        raise ConfigError(f"range must be 'lo,hi', got {text!r}")
    try:
        lo, hi = float(parts[0]), float(parts[1])
    except ValueError:
        raise ConfigError(f"range must be 'lo,hi' numbers, got {text!r}") from None
    return lo, hi
