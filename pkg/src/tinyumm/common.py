"""Shared plumbing: deterministic RNG streams, rounding, JSON and PNG io."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np
from PIL import Image


class ConfigError(ValueError):
    """Bad configuration or arguments. The CLI maps this to exit code 2."""


def rng_from(*entropy: int) -> np.random.Generator:
    """PCG64 generator keyed by a tuple of non-negative ints.

    Every source of randomness in the package goes through one of these,
    keyed by (purpose tag, seed, ...), so runs replay bit-identically.
    """
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(list(entropy))))


def round_half_up(x):
    """Round to nearest integer with .5 going up. np.round ties to even."""
    return np.floor(np.asarray(x, dtype=np.float64) + 0.5)


def write_json(path: str | Path, obj) -> None:
    """UTF-8 JSON with sorted keys and a trailing newline."""
    Path(path).write_text(
        json.dumps(obj, sort_keys=True, indent=2, ensure_ascii=False) + "\n",
        encoding="utf-8",
    )


def read_json(path: str | Path):
    return json.loads(Path(path).read_text(encoding="utf-8"))


def sha256_file(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def sha256_array(arr: np.ndarray) -> str:
    """Hash of an array's canonical float64 little-endian bytes."""
    canon = np.ascontiguousarray(arr, dtype="<f8")
    return hashlib.sha256(canon.tobytes()).hexdigest()


def save_png(path: str | Path, arr: np.ndarray) -> None:
    """Write uint8 (gray or RGB) or uint16 (gray) arrays as PNG bytes.

    The suffix on `path` is not consulted; the file content is always PNG.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if arr.dtype not in (np.uint8, np.uint16):
        raise ValueError(f"save_png expects uint8 or uint16, got {arr.dtype}")
    Image.fromarray(arr).save(path, format="PNG")


def load_png(path: str | Path) -> np.ndarray:
    with Image.open(Path(path)) as img:
        return np.array(img)
