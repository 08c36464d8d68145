"""Flat ``key = value`` configuration files.

Keys map one-to-one onto dataclass fields; unknown or repeated keys are
errors. Per-device "table" fields take a single value or a comma-separated
list with one entry per device.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

from .errors import ConfigError

_TRUE = {"true", "yes", "on", "1"}
_FALSE = {"false", "no", "off", "0"}


def _table(default):
    return field(default=default, metadata={"kind": "table"})


def _intlist(default=()):
    return field(default=default, metadata={"kind": "intlist"})


def _kind(f):
    if "kind" in f.metadata:
        return f.metadata["kind"]
    return {int: "int", float: "float", bool: "bool", str: "str", "int": "int", "float": "float", "bool": "bool", "str": "str"}[f.type]


def _parse_value(kind, key, raw):
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "bool":
            low = raw.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(raw)
        if kind == "str":
            return raw
        if kind == "table":
            parts = [p.strip() for p in raw.split(",")]
            return float(parts[0]) if len(parts) == 1 else tuple(float(p) for p in parts)
        if kind == "intlist":
            return tuple(int(p) for p in raw.split(",") if p.strip())
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {kind}") from None
    raise AssertionError(kind)


def _format_value(kind, value):
    if kind == "bool":
        return "true" if value else "false"
    if kind == "float":
        return repr(float(value))
    if kind == "table":
        if isinstance(value, tuple):
            return ", ".join(repr(float(v)) for v in value)
        return repr(float(value))
    if kind == "intlist":
        return ", ".join(str(v) for v in value)
    return str(value)


def parse_pairs(text, source="<config>"):
    pairs = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        key, sep, value = body.partition("=")
        if not sep:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key = key.strip()
        if key in pairs:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        pairs[key] = value.strip()
    return pairs


def parse_into(cls, text, source="<config>"):
    pairs = parse_pairs(text, source)
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(pairs) - set(known))
    if unknown:
        raise ConfigError(f"{source}: unknown key(s) {', '.join(unknown)}")
    kwargs = {k: _parse_value(_kind(known[k]), k, v) for k, v in pairs.items()}
    return cls(**kwargs)


def dump(obj):
    lines = []
    for f in dataclasses.fields(obj):
        lines.append(f"{f.name} = {_format_value(_kind(f), getattr(obj, f.name))}")
    return "\n".join(lines) + "\n"


def load(cls, path):
    try:
        with open(path, encoding="utf8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return parse_into(cls, text, str(path))


@dataclass
class ExperimentConfig:
    rounds: int = 30
    local_epochs: int = 2
    num_devices: int = 10
    clusters: int = 3
    d_max: float = math.inf
    lr: float = 0.05
    batch_size: int = 16
    seed: int = 0
    act_enabled: bool = True
    esc_export: bool = False
    channel_jitter: bool = False
    jitter_std_db: float = 4.0
    dataset: str = "synthetic"
    image_size: int = 16
    test_fraction: float = 0.2
    volume_min: int = 50
    volume_max: int = 500
    volumes: tuple = _intlist()
    semantic_dim: int = 16
    noise_std: float = _table(0.1)
    channel_gain: float = _table(1.0)
    cpu_freq_hz: float = _table(2e9)
    p_up_w: float = _table(0.01)
    p_down_w: float = _table(1.0)
    b_up_hz: float = _table(1e6)
    b_down_hz: float = _table(20e6)
    gain_db: float = _table(-50.0)
    noise_dbm_hz: float = _table(-174.0)
    interference_up_w: float = _table(0.0)
    interference_down_w: float = _table(0.0)
    kappa: float = _table(10.0)
    slope: float = 0.2
    delay_weight: float = 1e-3
    fisher_samples: int = 0
    workers: int = 1
    esc_images: int = 20

    def __post_init__(self):
        for name in ("rounds", "local_epochs", "num_devices", "clusters", "batch_size", "image_size",
                     "volume_min", "volume_max", "semantic_dim", "workers"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.clusters > self.num_devices:
            raise ConfigError("clusters cannot exceed num_devices")
        if self.volume_min > self.volume_max:
            raise ConfigError("volume_min exceeds volume_max")
        if not 0.0 < self.test_fraction < 1.0:
            raise ConfigError("test_fraction must lie in (0, 1)")
        if not self.lr > 0 or not self.d_max > 0:
            raise ConfigError("lr and d_max must be positive")
        if not 0.0 < self.slope < 1.0:
            raise ConfigError("slope must lie in (0, 1)")
        if self.volumes and len(self.volumes) != self.num_devices:
            raise ConfigError(f"volumes lists {len(self.volumes)} entries for {self.num_devices} devices")
        if self.volumes and min(self.volumes) < 1:
            raise ConfigError("every device needs at least one sample")
        for f in dataclasses.fields(self):
            if f.metadata.get("kind") == "table":
                v = getattr(self, f.name)
                if isinstance(v, tuple) and len(v) != self.num_devices:
                    raise ConfigError(f"{f.name} lists {len(v)} entries for {self.num_devices} devices")

    def device_value(self, name, n):
        v = getattr(self, name)
        return v[n] if isinstance(v, tuple) else v

    def table_mean(self, name):
        v = getattr(self, name)
        return sum(v) / len(v) if isinstance(v, tuple) else v

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    @classmethod
    def from_file(cls, path):
        return load(cls, path)

    @classmethod
    def from_text(cls, text):
        return parse_into(cls, text)

    def to_text(self):
        return dump(self)
