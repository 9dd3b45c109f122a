"""Shared error types and the plain-text key=value config format."""


class ConfigError(ValueError):
    """Invalid configuration or CLI arguments (exit code 2)."""


class TrainingDiverged(RuntimeError):
    """Non-finite loss during training (exit code 3)."""


def parse_kv_file(path):
    """Parse `key = value` lines; '#' starts a comment, blank lines ignored."""
    out = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError("%s:%d: expected key=value, got %r" % (path, lineno, line))
            key, val = line.split("=", 1)
            out[key.strip()] = val.strip()
    return out


def write_kv_file(path, mapping):
    with open(path, "w") as fh:
        for key in sorted(mapping):
            fh.write("%s=%s\n" % (key, mapping[key]))


def coerce(value, like):
    """Coerce a config string to the type of an existing default value."""
    if isinstance(like, bool):
        low = value.lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise ConfigError("expected boolean, got %r" % value)
    if isinstance(like, int):
        return int(value)
    if isinstance(like, float):
        return float(value)
    return value
