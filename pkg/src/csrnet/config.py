"""Flat ``key = value`` text configs shared by checkpoints and the CLI."""

import dataclasses

from .errors import ConfigError


def parse_kv_text(text, source="<config>"):
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key = value, got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        out[key.replace("-", "_")] = value
    return out


def format_value(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ",".join(format_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def coerce(value, default):
    """Convert the string ``value`` to the type of ``default``."""
    if not isinstance(value, str):
        return value
    try:
        if isinstance(default, bool):
            low = value.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if isinstance(default, int):
            return int(float(value)) if "e" in value.lower() else int(value)
        if isinstance(default, float):
            return float(value)
        if isinstance(default, tuple):
            return tuple(int(v) for v in value.split(",") if v.strip())
    except ValueError:
        raise ConfigError(f"cannot parse {value!r} as {type(default).__name__}") from None
    return value


def dataclass_from_kv(cls, values, base=None):
    """Build dataclass ``cls`` from string values layered over ``base``.

    ``base`` defaults to ``cls()``; its field values also fix the types.
    """
    defaults = cls() if base is None else base
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(values) - names
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {', '.join(sorted(unknown))}")
    kwargs = {k: coerce(v, getattr(defaults, k)) for k, v in values.items()}
    return dataclasses.replace(defaults, **kwargs)


def dataclass_to_text(obj):
    return "".join(
        f"{f.name} = {format_value(getattr(obj, f.name))}\n" for f in dataclasses.fields(obj)
    )
