"""Flat `key = value` run configuration: file parsing, typed coercion against
a per-command schema, and layered resolution (defaults, then config file,
then --set overrides, then dedicated flags). Unknown keys are rejected
everywhere so a typo cannot silently fall back to a default.
"""

from __future__ import annotations

import os
from dataclasses import fields
from pathlib import Path

from .common import ConfigError
from .trainer import TrainConfig

OUT_ROOT_ENV = "TINYUMM_OUT_ROOT"


def parse_config_file(path: str | Path) -> dict:
    """`key = value` lines; blank lines and # comments ignored. Values stay
    raw strings until coerced against a schema."""
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    out = {}
    for lineno, raw in enumerate(p.read_text(encoding="utf-8").splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{p}:{lineno}: expected 'key = value', got {line!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        if not key:
            raise ConfigError(f"{p}:{lineno}: empty key")
        if key in out:
            raise ConfigError(f"{p}:{lineno}: duplicate key {key!r}")
        out[key] = value.strip()
    return out


def parse_set_overrides(pairs) -> dict:
    """--set key=value arguments, applied in order, later wins."""
    out = {}
    for pair in pairs or []:
        if "=" not in pair:
            raise ConfigError(f"--set expects key=value, got {pair!r}")
        key, _, value = pair.partition("=")
        out[key.strip()] = value.strip()
    return out


def coerce(key: str, raw, target_type: type):
    """Coerce one raw value (string or already typed) to the schema type."""
    if isinstance(raw, target_type) and not (
            target_type is int and isinstance(raw, bool)):
        return raw
    s = str(raw)
    try:
        if target_type is bool:
            if s.lower() in ("true", "false"):
                return s.lower() == "true"
            raise ValueError(s)
        if target_type is int:
            return int(s)
        if target_type is float:
            return float(s)
        return s
    except ValueError:
        raise ConfigError(
            f"key {key!r} expects {target_type.__name__}, got {raw!r}") from None


def resolve(schema: dict, *layers: dict) -> dict:
    """Apply layers of raw overrides onto schema defaults; reject unknowns."""
    out = dict(schema)
    for layer in layers:
        unknown = sorted(set(layer) - set(schema))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        for key, raw in layer.items():
            out[key] = coerce(key, raw, type(schema[key]))
    return out


def default_out_dir(command: str) -> str:
    root = os.environ.get(OUT_ROOT_ENV, "runs")
    return str(Path(root) / command)


# ============================================================
# Per-command schemas (key -> default; type is the default's type)
# ============================================================

TRAIN_SCHEMA = {f.name: f.default for f in fields(TrainConfig)}

DATA_SCHEMA = {
    "image_size": 32,
    "n_objects": 3,
    "n_train": 256,
    "n_eval": 64,
    "seed": 0,
    "out_dir": "",
}

EVAL_SCHEMA = {
    "ckpt": "",
    "data_dir": "",
    "split": "eval",
    "n_scenes": 0,      # 0 means the whole split
    "grid_rows": 8,
    "seed": 0,
    "out_dir": "",
}

GENERATE_SCHEMA = {
    "ckpt": "",
    "data_dir": "",
    "task": "pixel",
    "split": "eval",
    "n": 4,
    "seed": 0,
    "out_dir": "",
}

SCHEMAS = {
    "data": DATA_SCHEMA,
    "train": TRAIN_SCHEMA,
    "eval": EVAL_SCHEMA,
    "generate": GENERATE_SCHEMA,
    "ablate": TRAIN_SCHEMA,
}
