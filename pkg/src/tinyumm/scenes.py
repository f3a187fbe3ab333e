"""Procedural toy scenes with exact depth, instance masks, captions and QA.

Scenes double as training data and as the ground-truth oracle: rendering is
pure integer rasterization with no anti-aliasing, so rgb, depth and masks
agree bit-exactly, and every stored answer is derivable from the object list
alone. Nearer objects are drawn with a larger radius (a monocular size cue),
which keeps depth recoverable from the rgb image.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .common import ConfigError, rng_from

SHAPES = ("circle", "square", "triangle")
COLORS = {
    "red": (255, 0, 0),
    "green": (0, 255, 0),
    "blue": (0, 0, 255),
    "yellow": (255, 255, 0),
}
BACKGROUND_RGB = (200, 200, 200)

# Depth layers sit off the exact rounding midpoints of 8-bit normalization:
# for every (near, far) pair drawn from the grid plus the background, the
# normalized value (d - dmin) / (dmax - dmin) * 255 stays clear of n + 1/2,
# so per-pixel rounding is stable under affine rescalings of the raw map.
DEPTH_GRID = (0.22, 0.42, 0.62, 0.82)

# Minimum horizontal gap between object centers, so "from left to right"
# captions have an unambiguous order.
MIN_X_GAP = 4

_SCENE_TAG = 101
_QA_TAG = 102


# ============================================================
# Domain types
# ============================================================

@dataclass(frozen=True)
class SceneSpec:
    image_size: int = 32
    n_objects: int = 3
    shape_vocab: tuple = SHAPES
    color_vocab: tuple = tuple(COLORS)
    depth_layers: tuple = DEPTH_GRID
    background_depth: float = 1.0

    def validate(self) -> None:
        if self.image_size < 16:
            raise ConfigError(f"image_size must be >= 16, got {self.image_size}")
        if not 1 <= self.n_objects <= 3:
            raise ConfigError(f"n_objects must be in [1, 3], got {self.n_objects}")
        if self.n_objects > len(self.depth_layers):
            raise ConfigError(
                f"n_objects={self.n_objects} exceeds depth_layers count {len(self.depth_layers)}"
            )
        if self.n_objects > len(self.color_vocab):
            raise ConfigError("n_objects exceeds color_vocab size; colors must be distinct")
        if self.n_objects > len(self.shape_vocab):
            raise ConfigError("n_objects exceeds shape_vocab size; shapes must be distinct")
        if len(set(self.depth_layers)) != len(self.depth_layers):
            raise ConfigError("depth_layers must be distinct")
        if not all(0.0 < d < 1.0 for d in self.depth_layers):
            raise ConfigError("depth_layers must lie in (0, 1)")
        for c in self.color_vocab:
            if c not in COLORS:
                raise ConfigError(f"unknown color {c!r}")
        for s in self.shape_vocab:
            if s not in SHAPES:
                raise ConfigError(f"unknown shape {s!r}")


@dataclass(frozen=True)
class SceneObject:
    shape: str
    color: str
    cx: int
    cy: int
    radius: int
    depth: float


@dataclass(frozen=True)
class Scene:
    spec: SceneSpec
    objects: tuple  # sorted near to far
    seed: int


@dataclass
class RenderedScene:
    rgb: np.ndarray        # [H, W, 3] uint8
    depth_raw: np.ndarray  # [H, W] float64, background_depth where uncovered
    masks: list            # per object, [H, W] bool, occlusion-aware
    caption: str
    qa: list               # (question, answer, category) triples


# ============================================================
# Generation
# ============================================================

def radius_for(depth: float, image_size: int) -> int:
    """Radius in pixels as a decreasing function of depth (size cue)."""
    r = np.floor((7.0 - 5.0 * depth) * image_size / 32.0 + 0.5)
    return max(2, int(r))


def generate_scene(spec: SceneSpec, seed: int) -> Scene:
    """Pure function of (spec, seed). Objects never overlap or touch."""
    spec.validate()
    if seed < 0:
        raise ConfigError(f"seed must be >= 0, got {seed}")
    rng = rng_from(_SCENE_TAG, seed)
    n = spec.n_objects
    shapes = [spec.shape_vocab[i] for i in rng.permutation(len(spec.shape_vocab))[:n]]
    colors = [spec.color_vocab[i] for i in rng.permutation(len(spec.color_vocab))[:n]]
    depths = [spec.depth_layers[i] for i in rng.permutation(len(spec.depth_layers))[:n]]
    radii = [radius_for(d, spec.image_size) for d in depths]

    size = spec.image_size
    for _ in range(10000):
        centers = [
            (int(rng.integers(r, size - r)), int(rng.integers(r, size - r)))
            for r in radii
        ]
        ok = True
        for i in range(n):
            for j in range(i + 1, n):
                dx = abs(centers[i][0] - centers[j][0])
                dy = abs(centers[i][1] - centers[j][1])
                if max(dx, dy) < radii[i] + radii[j] + 1 or dx < MIN_X_GAP:
                    ok = False
        if ok:
            break
    else:
        raise ConfigError(
            f"could not place {n} objects in a {size}x{size} image; enlarge image_size"
        )

    objs = [
        SceneObject(shapes[i], colors[i], centers[i][0], centers[i][1], radii[i], depths[i])
        for i in range(n)
    ]
    objs.sort(key=lambda o: o.depth)
    return Scene(spec=spec, objects=tuple(objs), seed=seed)


# ============================================================
# Rendering
# ============================================================

def rasterize(shape: str, cx: int, cy: int, radius: int, size: int) -> np.ndarray:
    """Boolean coverage mask for one primitive, integer arithmetic only."""
    ys = np.arange(size, dtype=np.int64)[:, None] - cy
    xs = np.arange(size, dtype=np.int64)[None, :] - cx
    r = radius
    if shape == "circle":
        return ys * ys + xs * xs <= r * r
    if shape == "square":
        return np.maximum(np.abs(ys), np.abs(xs)) <= r
    if shape == "triangle":
        # apex at the top, base at the bottom
        return (np.abs(ys) <= r) & (np.abs(xs) <= (ys + r) // 2)
    raise ConfigError(f"unknown shape {shape!r}")


def render(scene: Scene) -> RenderedScene:
    spec = scene.spec
    size = spec.image_size
    rgb = np.empty((size, size, 3), dtype=np.uint8)
    rgb[:] = BACKGROUND_RGB
    depth_raw = np.full((size, size), spec.background_depth, dtype=np.float64)

    coverage = [rasterize(o.shape, o.cx, o.cy, o.radius, size) for o in scene.objects]
    # paint far to near so the nearest object wins overlapping pixels
    for obj, cov in sorted(zip(scene.objects, coverage), key=lambda p: -p[0].depth):
        rgb[cov] = COLORS[obj.color]
        depth_raw[cov] = obj.depth
    masks = [cov & (depth_raw == obj.depth) for obj, cov in zip(scene.objects, coverage)]

    return RenderedScene(
        rgb=rgb,
        depth_raw=depth_raw,
        masks=masks,
        caption=make_caption(scene),
        qa=make_qa(scene, scene.seed),
    )


def make_caption(scene: Scene) -> str:
    objs = sorted(scene.objects, key=lambda o: o.cx)
    phrases = [f"a {o.color} {o.shape}" for o in objs]
    if len(phrases) == 1:
        return phrases[0]
    return "from left to right, " + ", ".join(phrases[:-1]) + " and " + phrases[-1]


# ============================================================
# Question answering
# ============================================================

def make_qa(scene: Scene, seed: int) -> list:
    """(question, answer, category) triples, all answerable from objects.

    Spatial questions are yes/no depth comparisons, asked only for pairs
    whose size cue is unambiguous in the render (radii differing by at
    least 2 px); the mention order is shuffled so neither answer dominates.
    Presence questions come in a yes/no pair per scene for the same reason.
    """
    rng = rng_from(_QA_TAG, seed)
    objs = scene.objects
    qa = []

    for i in range(len(objs)):
        for j in range(i + 1, len(objs)):
            a, b = objs[i], objs[j]
            if abs(a.radius - b.radius) < 2:
                continue
            if rng.integers(2):
                a, b = b, a
            qa.append((
                f"Is the {a.color} {a.shape} closer than the {b.color} {b.shape}?",
                "yes" if a.depth < b.depth else "no",
                "spatial",
            ))

    present = objs[int(rng.integers(len(objs)))]
    qa.append((f"Is there a {present.color} {present.shape}?", "yes", "presence"))
    combos = [
        (c, s)
        for c in scene.spec.color_vocab
        for s in scene.spec.shape_vocab
        if all((o.color, o.shape) != (c, s) for o in objs)
    ]
    c, s = combos[int(rng.integers(len(combos)))]
    qa.append((f"Is there a {c} {s}?", "no", "presence"))

    for o in objs:
        qa.append((f"What color is the {o.shape}?", o.color, "attribute"))
    return qa


def oracle_answer(scene: Scene, question: str) -> str:
    """Answer a question by reading Scene.objects alone."""
    q = question.rstrip("?")
    if q.startswith("Is the ") and " closer than the " in q:
        rest = q[len("Is the "):]
        first, second = rest.split(" closer than the ")
        cands = []
        for phrase in (first, second):
            color, shape = phrase.split(" ")
            matches = [o for o in scene.objects if o.color == color and o.shape == shape]
            if len(matches) != 1:
                raise ValueError(f"ambiguous reference {phrase!r}")
            cands.append(matches[0])
        return "yes" if cands[0].depth < cands[1].depth else "no"
    if q.startswith("Is there a "):
        color, shape = q[len("Is there a "):].split(" ")
        hit = any(o.color == color and o.shape == shape for o in scene.objects)
        return "yes" if hit else "no"
    if q.startswith("What color is the "):
        shape = q[len("What color is the "):]
        matches = [o for o in scene.objects if o.shape == shape]
        if len(matches) != 1:
            raise ValueError(f"shape {shape!r} is not unique in the scene")
        return matches[0].color
    raise ValueError(f"unrecognized question {question!r}")
