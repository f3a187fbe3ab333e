"""Training-target formats for the two intrinsic generation tasks.

Depth targets are min-max normalized to [0, 255] and replicated across three
channels. Segmentation targets paint mask boundaries white on black, where a
boundary pixel is a mask pixel with at least one of its 4-neighbors outside
the mask or outside the image.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .common import round_half_up


@dataclass
class DepthTarget:
    map: np.ndarray  # [H, W, 3] uint8, channels identical
    degenerate: bool  # constant input, formula undefined, map all zeros


@dataclass
class SegTarget:
    map: np.ndarray  # [H, W, 3] uint8, every pixel 0 or 255


def normalize_depth(depth_raw: np.ndarray) -> DepthTarget:
    """(D - D_min) / (D_max - D_min) * 255, rounded half up, 3 channels."""
    d = np.asarray(depth_raw, dtype=np.float64)
    if d.ndim != 2 or d.size == 0:
        raise ValueError(f"expected a nonempty H x W map, got shape {d.shape}")
    if not np.all(np.isfinite(d)):
        raise ValueError("depth map contains non-finite values")
    dmin, dmax = d.min(), d.max()
    if dmax == dmin:
        plane = np.zeros(d.shape, dtype=np.uint8)
        return DepthTarget(map=np.repeat(plane[:, :, None], 3, axis=2), degenerate=True)
    plane = round_half_up((d - dmin) / (dmax - dmin) * 255.0).astype(np.uint8)
    return DepthTarget(map=np.repeat(plane[:, :, None], 3, axis=2), degenerate=False)


def boundary_map(masks, shape=None) -> SegTarget:
    """Union of 1-pixel 4-connected boundaries of the given binary masks.

    `shape` is required when `masks` is empty (the result is then all black)
    and otherwise cross-checked against the masks.
    """
    masks = [np.asarray(m).astype(bool) for m in masks]
    if masks:
        h, w = masks[0].shape
    elif shape is not None:
        h, w = shape
    else:
        raise ValueError("zero masks given; pass shape=(H, W)")
    for k, m in enumerate(masks):
        if m.shape != (h, w):
            raise ValueError(f"mask {k} has shape {m.shape}, expected {(h, w)}")
    out = np.zeros((h, w), dtype=bool)
    for m in masks:
        p = np.pad(m, 1, constant_values=False)
        interior = p[:-2, 1:-1] & p[2:, 1:-1] & p[1:-1, :-2] & p[1:-1, 2:]
        out |= m & ~interior
    plane = np.where(out, 255, 0).astype(np.uint8)
    return SegTarget(map=np.repeat(plane[:, :, None], 3, axis=2))
