"""Flat ``key = value`` config files with dotted section prefixes.

    # comment
    seed = 7
    train.epochs = 29

Values stay strings until a consumer coerces them against a default.
"""

from pathlib import Path


class ConfigError(ValueError):
    pass


def parse_config(text, source="<config>"):
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        out[key] = value
    return out


def read_config(path):
    return parse_config(Path(path).read_text(), str(path))


def format_config(values):
    return "".join(f"{k} = {values[k]}\n" for k in sorted(values))


def write_config(path, values):
    Path(path).write_text(format_config(values))


def coerce(value, default):
    """Convert the string ``value`` to the type of ``default``."""
    if not isinstance(value, str):
        return value
    if isinstance(default, bool):
        low = value.lower()
        if low in ("1", "true", "yes", "on", "y"):
            return True
        if low in ("0", "false", "no", "off", "n"):
            return False
        raise ConfigError(f"not a boolean: {value!r}")
    if isinstance(default, int):
        return int(value)
    if isinstance(default, float):
        return float(value)
    if default is None:
        if value in ("", "None", "none", "auto"):
            return None
        try:
            return float(value)
        except ValueError:
            return value
    return value


def overlay(dataclass_obj, values, prefix):
    """Return a copy of a frozen dataclass with ``prefix.field`` keys applied."""
    import dataclasses

    changes = {}
    for f in dataclasses.fields(dataclass_obj):
        key = f"{prefix}.{f.name}"
        if key in values:
            changes[f.name] = coerce(values[key], getattr(dataclass_obj, f.name))
    return dataclasses.replace(dataclass_obj, **changes)


def flatten(dataclass_obj, prefix):
    import dataclasses

    return {f"{prefix}.{f.name}": _fmt(getattr(dataclass_obj, f.name)) for f in dataclasses.fields(dataclass_obj)}


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (list, tuple)):
        return ",".join(_fmt(x) for x in v)
    return str(v)
