"""Flat experiment configuration with dotted section keys.

Files look like::

    seed = 7
    diffusion.T = 50
    mask.strategy = "BoM"

Every key has a default and a type; unknown keys are rejected.
"""

from __future__ import annotations

import dataclasses
from pathlib import Path

import tomli

from .errors import ConfigError

DEFAULTS = {
    "seed": 7,
    "variant": "12",
    # dataset: a synthetic preset, or a directory holding train/valid/test .tsdc files
    "data.preset": "desk",
    "data.path": "",
    "data.types": "all",  # anomaly types in train/valid; comma list or "all"
    "data.test_types": "all",
    "data.rate_train": -1.0,  # negative keeps the preset's rate
    "data.rate_valid": -1.0,
    "data.rate_test": -1.0,
    "mask.strategy": "BoM",
    "mask.r": 32,
    "diffusion.T": 50,
    "diffusion.blocks": 4,
    "diffusion.channels": 32,
    "diffusion.bidirectional": True,
    "s4.state_size": 32,
    "s4.layers": 2,
    "s4.width": 32,
    "graph.g": 16,
    "graph.delta": 3,
    "graph.zeta": 0.5,
    "graph.xi1": 0.1,
    "graph.xi2": 0.1,
    "graph.xi3": 0.1,
    "graph.gin_layers": 2,
    "graph.gin_hidden": 64,
    "graph.embed_dim": 32,
    "score.lam1": 0.5,
    "score.lam2": 0.5,
    "score.repeats": 3,
    "train.epochs": 30,
    "train.batch": 16,
    "train.patience": 5,
    "train.lr": 1e-3,
    "train.detach_x0": True,
    "train.eval_batch": 128,
}

_CHOICES = {
    "variant": ("1", "2", "12"),
    "mask.strategy": ("RandM", "RandBM", "BoM"),
}


def _coerce(key, value):
    default = DEFAULTS[key]
    kind = type(default)
    if kind is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{key} must be true or false, got {value!r}")
        return value
    if kind is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key} must be an integer, got {value!r}")
        return value
    if kind is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key} must be a number, got {value!r}")
        return float(value)
    value = str(value)
    if key in _CHOICES:
        match = [c for c in _CHOICES[key] if c.lower() == value.lower()]
        if not match:
            raise ConfigError(f"{key} must be one of {_CHOICES[key]}, got {value!r}")
        value = match[0]
    return value


def _flatten(table, prefix=""):
    for k, v in table.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            yield from _flatten(v, key + ".")
        else:
            yield key, v


class Config(dict):
    """A dict of resolved settings keyed by dotted names."""

    def __init__(self, overrides=None):
        super().__init__(DEFAULTS)
        self.update_checked(overrides or {})

    def update_checked(self, items):
        for key, value in dict(items).items():
            if key not in DEFAULTS:
                raise ConfigError(f"unknown config key {key!r}")
            self[key] = _coerce(key, value)
        return self

    def with_(self, **items):
        """Copy with overrides; use double underscores for dots (``mask__r=8``)."""
        out = Config(dict(self))
        out.update_checked({k.replace("__", "."): v for k, v in items.items()})
        return out

    def section(self, name):
        pre = name + "."
        return {k[len(pre):]: v for k, v in self.items() if k.startswith(pre)}

    def dumps(self):
        lines = []
        for key in DEFAULTS:
            lines.append(f"{key} = {_literal(self[key])}")
        return "\n".join(lines) + "\n"

    def save(self, path):
        Path(path).write_text(self.dumps())


def _literal(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, str):
        return '"' + v.replace("\\", "\\\\").replace('"', '\\"') + '"'
    return repr(v)


def loads(text):
    try:
        table = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    return Config(dict(_flatten(table)))


def load(path):
    return loads(Path(path).read_text())


def parse_override(item):
    """Parse a ``key=value`` command-line override using the file syntax."""
    if "=" not in item:
        raise ConfigError(f"override must look like key=value, got {item!r}")
    key, _, raw = item.partition("=")
    key = key.strip()
    try:
        value = tomli.loads(f"v = {raw.strip()}")["v"]
    except tomli.TOMLDecodeError:
        value = raw.strip()  # bare strings are accepted on the command line
    return key, value


def synthetic_config(cfg: Config):
    """SyntheticConfig for the configured preset with any rate/type overrides."""
    from .data import ANOMALY_TYPES, PRESETS

    preset = cfg["data.preset"]
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    base = PRESETS[preset]
    kw = {}
    for split in ("train", "valid", "test"):
        rate = cfg[f"data.rate_{split}"]
        if rate >= 0:
            kw[f"rate_{split}"] = rate
    for key, field in (("data.types", "types"), ("data.test_types", "test_types")):
        raw = cfg[key].strip()
        kw[field] = ANOMALY_TYPES if raw == "all" else tuple(
            t.strip() for t in raw.split(",") if t.strip())
    return dataclasses.replace(base, **kw)
