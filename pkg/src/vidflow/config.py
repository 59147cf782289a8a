"""Flat `key = value` config files with typed, order-preserving round trips."""


def _typed(raw):
    low = raw.lower()
    if low == "true":
        return True
    if low == "false":
        return False
    try:
        return int(raw)
    except ValueError:
        pass
    try:
        return float(raw)
    except ValueError:
        pass
    return raw


def parse_config(text):
    """-> ordered {key: typed value}; '#' starts a comment line."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ValueError(f"line {lineno}: expected 'key = value', "
                             f"got {stripped!r}")
        key, _, raw = stripped.partition("=")
        key = key.strip()
        if not key:
            raise ValueError(f"line {lineno}: empty key")
        if key in out:
            raise ValueError(f"line {lineno}: duplicate key {key!r}")
        out[key] = _typed(raw.strip())
    return out


def _format_value(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def serialize_config(cfg):
    """Inverse of parse_config: parse(serialize(parse(t))) == parse(t)."""
    return "".join(f"{k} = {_format_value(v)}\n" for k, v in cfg.items())


def load_config(path):
    with open(path, encoding="utf-8") as f:
        return parse_config(f.read())


def check_keys(cfg, allowed, context=""):
    """Reject keys outside the allowed set; typos fail loudly, not silently."""
    unknown = sorted(set(cfg) - set(allowed))
    if unknown:
        where = f" for {context}" if context else ""
        raise ValueError(f"unknown config keys{where}: {', '.join(unknown)}; "
                         f"allowed: {', '.join(sorted(allowed))}")
    return cfg
