"""Scoring for both directions of multi-task training: question answering on
held-out scenes (spatial / presence / attribute accuracy) and representation
generation (pixel MSE, depth similarity, boundary F1, compositional probe).

All scores are plain fractions with no smoothing; evaluation never mutates the
model. The compositional probe is deterministic template matching, so no
second model enters the scoring loop.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch

from .common import ConfigError, rng_from, save_png
from .data import LoadedSplit, SceneDataset
from .model import UMM
from .scenes import BACKGROUND_RGB, COLORS, SceneSpec, radius_for, rasterize
from .text import GEN_TASKS, canonicalize

_GEN_EVAL_TAG = 601

VQA_CATEGORIES = ("spatial", "presence", "attribute")


# ============================================================
# Metrics on maps
# ============================================================

def depth_similarity(pred: np.ndarray, target: np.ndarray) -> float:
    """1 - MAE between two uint8 maps scaled to [0, 1], channels averaged to
    one plane first. Integer arithmetic keeps the round cases exact:
    identical -> 1.0, all-0 vs all-255 -> 0.0, constant offset 51 -> 0.8.
    """
    a = np.asarray(pred)
    b = np.asarray(target)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.ndim == 3:
        pa = a.astype(np.int64).sum(axis=2)
        pb = b.astype(np.int64).sum(axis=2)
        denom = 255 * a.shape[2]
    else:
        pa = a.astype(np.int64)
        pb = b.astype(np.int64)
        denom = 255
    mean_abs = float(np.abs(pa - pb).mean())
    return 1.0 - mean_abs / denom


def _dilate(mask: np.ndarray, radius: int) -> np.ndarray:
    """Binary dilation with a Chebyshev ball (square structuring element)."""
    out = mask.copy()
    for _ in range(radius):
        grown = out.copy()
        grown[1:, :] |= out[:-1, :]
        grown[:-1, :] |= out[1:, :]
        grown[:, 1:] |= out[:, :-1]
        grown[:, :-1] |= out[:, 1:]
        grown[1:, 1:] |= out[:-1, :-1]
        grown[1:, :-1] |= out[:-1, 1:]
        grown[:-1, 1:] |= out[1:, :-1]
        grown[:-1, :-1] |= out[1:, 1:]
        out = grown
    return out


def seg_similarity(pred: np.ndarray, target: np.ndarray, tolerance: int = 1) -> float:
    """Boundary F1: maps binarized at 128; a predicted boundary pixel counts
    as correct when a target pixel lies within Chebyshev distance
    `tolerance`, and symmetrically for recall. Two empty maps score 1.0."""
    a = np.asarray(pred)
    b = np.asarray(target)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.ndim == 3:
        a = a[..., 0]
        b = b[..., 0]
    p = a >= 128
    g = b >= 128
    np_, ng = int(p.sum()), int(g.sum())
    if np_ == 0 and ng == 0:
        return 1.0
    if np_ == 0 or ng == 0:
        return 0.0
    g_near = _dilate(g, tolerance) if tolerance > 0 else g
    p_near = _dilate(p, tolerance) if tolerance > 0 else p
    precision = int((p & g_near).sum()) / np_
    recall = int((g & p_near).sum()) / ng
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


# ============================================================
# Question answering
# ============================================================

@dataclass
class VqaResult:
    accuracies: dict          # category -> fraction, or None when no questions
    n_questions: dict         # category -> count
    oov_answers: int          # answers outside the closed answer vocabulary
    oov_examples: list        # up to 10 (question, answer) pairs for the log


def vqa_eval(answer_fn, split: LoadedSplit, valid_answers=None) -> VqaResult:
    """Score an answerer over every question of a split.

    `answer_fn(image_uint8, question) -> answer string`; scoring is exact
    match after canonicalization. Answers outside `valid_answers` (when
    given) count as wrong and are tallied as out-of-vocabulary.
    """
    correct = {c: 0 for c in VQA_CATEGORIES}
    totals = {c: 0 for c in VQA_CATEGORIES}
    oov, oov_examples = 0, []
    valid = None if valid_answers is None else {canonicalize(v) for v in valid_answers}
    for scene_idx, question, gold, category in split.qa_flat:
        if category not in totals:
            raise ConfigError(f"unknown question category {category!r}")
        totals[category] += 1
        got = canonicalize(str(answer_fn(split.rgb[scene_idx], question)))
        if valid is not None and got not in valid:
            oov += 1
            if len(oov_examples) < 10:
                oov_examples.append((question, got))
            continue
        if got == canonicalize(gold):
            correct[category] += 1
    accuracies = {c: (correct[c] / totals[c] if totals[c] else None)
                  for c in VQA_CATEGORIES}
    return VqaResult(accuracies, totals, oov, oov_examples)


def model_answerer(model: UMM):
    """Closed-vocabulary answerer: argmax over the answer head."""
    def answer(image: np.ndarray, question: str) -> str:
        with torch.no_grad():
            h = model.encode_understanding(image[None])
            prompt = torch.from_numpy(model.prompt_ids(question, "und")[None])
            logits = model.answer_logits(h, prompt)
        return model.answers[int(logits[0].argmax())]
    return answer


# ============================================================
# Generation scoring
# ============================================================

def generate_for_scene(model: UMM, dataset: SceneDataset, split: LoadedSplit,
                       scene_idx: int, task: str, seed: int) -> np.ndarray:
    """One deterministic generation: prompt pick and sampler noise are both
    keyed by (seed, scene index, task)."""
    ti = GEN_TASKS.index(task)
    rng = rng_from(_GEN_EVAL_TAG, seed, scene_idx, ti)
    pool = dataset.pools[task]
    prompt_text = pool.prompts[int(rng.integers(len(pool.prompts)))]
    with torch.no_grad():
        h = model.encode_understanding(split.rgb[scene_idx][None])
        prompt = torch.from_numpy(model.prompt_ids(prompt_text, task)[None])
        gen_seed = int(rng.integers(0, 2**31 - 1))
        return model.generate(h, prompt, gen_seed)


def recon_mse(pred: np.ndarray, target: np.ndarray) -> float:
    """Mean squared error between uint8 images scaled to [0, 1]."""
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    d = pred.astype(np.float64) / 255.0 - target.astype(np.float64) / 255.0
    return float((d * d).mean())


# ============================================================
# Compositional probe
# ============================================================

def parse_caption(caption: str, spec: SceneSpec) -> list:
    """Recover the (color, shape) list, left to right, from a caption."""
    words = canonicalize(caption).split()
    colors = set(spec.color_vocab)
    shapes = set(spec.shape_vocab)
    out = []
    for i in range(len(words) - 1):
        if words[i] in colors and words[i + 1] in shapes:
            out.append((words[i], words[i + 1]))
    if not out:
        raise ConfigError(f"caption mentions no objects: {caption!r}")
    return out


def _color_mask(image: np.ndarray, color: str) -> np.ndarray:
    """Pixels whose nearest canonical color (objects + background) is `color`."""
    palette = dict(COLORS)
    palette["__background__"] = BACKGROUND_RGB
    names = list(palette)
    ref = np.array([palette[n] for n in names], dtype=np.float64)  # [C, 3]
    px = image.astype(np.float64).reshape(-1, 1, 3)
    d2 = ((px - ref[None]) ** 2).sum(axis=2)                       # [HW, C]
    nearest = d2.argmin(axis=1).reshape(image.shape[:2])
    return nearest == names.index(color)


def _templates(spec: SceneSpec) -> dict:
    """(shape, radius) -> bool template of side 2r+1, all radii the renderer
    can produce under the spec's depth layers."""
    radii = sorted({radius_for(d, spec.image_size) for d in spec.depth_layers})
    out = {}
    for shape in spec.shape_vocab:
        for r in radii:
            side = 2 * r + 1
            out[(shape, r)] = rasterize(shape, r, r, r, side)
    return out


def _best_match(mask: np.ndarray, templates: dict, shape: str) -> tuple:
    """Max IoU of `mask` against `shape` templates over every placement.
    Returns (iou, center_x). Placement search is one correlation per radius."""
    best_iou, best_x = 0.0, -1.0
    m = torch.from_numpy(mask.astype(np.float32))[None, None]
    area_mask = float(mask.sum())
    for (s, r), tpl in templates.items():
        if s != shape:
            continue
        t = torch.from_numpy(tpl.astype(np.float32))[None, None]
        inter = torch.nn.functional.conv2d(m, t).numpy()[0, 0]  # valid placements
        union = area_mask + float(tpl.sum()) - inter
        iou = inter / np.maximum(union, 1.0)
        ij = np.unravel_index(int(iou.argmax()), iou.shape)
        if float(iou[ij]) > best_iou:
            best_iou = float(iou[ij])
            best_x = ij[1] + r  # template corner -> center column
    return best_iou, best_x


def compositional_check(images: list, captions: list, spec: SceneSpec,
                        iou_threshold: float = 0.75) -> float:
    """Fraction of images where every captioned object is found as a blob of
    its stated color matching its stated shape (IoU >= threshold against a
    rasterized primitive at some radius and position), with detected centers
    in the caption's left-to-right order."""
    if len(images) != len(captions) or not images:
        raise ConfigError("images and captions must be equal-length and non-empty")
    templates = _templates(spec)
    passed = 0
    for image, caption in zip(images, captions):
        mentioned = parse_caption(caption, spec)
        xs = []
        ok = True
        for color, shape in mentioned:
            mask = _color_mask(image, color)
            iou, cx = _best_match(mask, templates, shape)
            if iou < iou_threshold:
                ok = False
                break
            xs.append(cx)
        if ok and all(xs[i] < xs[i + 1] for i in range(len(xs) - 1)):
            passed += 1
    return passed / len(images)


# ============================================================
# Full report
# ============================================================

@dataclass
class EvalReport:
    vqa_spatial_acc: float | None
    vqa_presence_acc: float | None
    vqa_attribute_acc: float | None
    depth_sim: float
    seg_sim: float
    recon_mse: float
    comp_score: float
    n_eval: int

    def validate(self) -> None:
        if self.n_eval <= 0:
            raise ValueError("n_eval must be positive")
        for name in ("vqa_spatial_acc", "vqa_presence_acc", "vqa_attribute_acc",
                     "depth_sim", "seg_sim", "comp_score"):
            v = getattr(self, name)
            if v is not None and not (0.0 <= v <= 1.0):
                raise ValueError(f"{name} out of [0, 1]: {v}")

    def to_dict(self) -> dict:
        return asdict(self)


def evaluate(model: UMM, dataset: SceneDataset, split_name: str = "eval",
             seed: int = 0, n_scenes: int | None = None) -> EvalReport:
    """Score one model snapshot on a split: VQA accuracy from the answer
    head, generation quality from one deterministic sample per scene and
    task, and the compositional probe on the pixel generations."""
    split = dataset.split(split_name)
    n = len(split.ids) if n_scenes is None else min(n_scenes, len(split.ids))
    if n <= 0:
        raise ConfigError(f"split {split_name!r} has no scenes")
    sub = _take(split, n)

    was_training = model.training
    model.eval()
    vqa = vqa_eval(model_answerer(model), sub, valid_answers=model.answers)

    d_sims, s_sims, mses, pixels = [], [], [], []
    for i in range(n):
        gen_pix = generate_for_scene(model, dataset, sub, i, "pixel", seed)
        gen_dep = generate_for_scene(model, dataset, sub, i, "depth", seed)
        gen_seg = generate_for_scene(model, dataset, sub, i, "seg", seed)
        pixels.append(gen_pix)
        mses.append(recon_mse(gen_pix, sub.rgb[i]))
        d_sims.append(depth_similarity(gen_dep, sub.depth_target[i]))
        s_sims.append(seg_similarity(gen_seg, sub.seg_target[i]))
    comp = compositional_check(pixels, sub.captions, dataset.spec)
    if was_training:
        model.train()

    report = EvalReport(
        vqa_spatial_acc=vqa.accuracies["spatial"],
        vqa_presence_acc=vqa.accuracies["presence"],
        vqa_attribute_acc=vqa.accuracies["attribute"],
        depth_sim=float(np.mean(d_sims)),
        seg_sim=float(np.mean(s_sims)),
        recon_mse=float(np.mean(mses)),
        comp_score=comp,
        n_eval=n,
    )
    report.validate()
    return report


def _take(split: LoadedSplit, n: int) -> LoadedSplit:
    if n == len(split.ids):
        return split
    qa = split.qa[:n]
    return LoadedSplit(
        ids=split.ids[:n], rgb=split.rgb[:n],
        depth_target=split.depth_target[:n], seg_target=split.seg_target[:n],
        captions=split.captions[:n], qa=qa,
        qa_flat=[t for t in split.qa_flat if t[0] < n], meta=split.meta[:n],
    )


# ============================================================
# Panel grid
# ============================================================

def eval_grid(model: UMM, dataset: SceneDataset, out_path: str | Path,
              rows: int, split_name: str = "eval", seed: int = 0) -> np.ndarray:
    """PNG of `rows` scenes x 5 panels: input, generated pixel, generated
    depth, generated seg, and the target composite (depth target on the left
    half, seg target on the right half). Exactly rows*S by 5*S pixels."""
    split = dataset.split(split_name)
    if rows < 1 or rows > len(split.ids):
        raise ConfigError(f"rows must be in [1, {len(split.ids)}], got {rows}")
    size = dataset.spec.image_size
    grid = np.zeros((rows * size, 5 * size, 3), dtype=np.uint8)
    for i in range(rows):
        composite = np.concatenate(
            [split.depth_target[i][:, : size // 2],
             split.seg_target[i][:, size // 2:]], axis=1)
        panels = [
            split.rgb[i],
            generate_for_scene(model, dataset, split, i, "pixel", seed),
            generate_for_scene(model, dataset, split, i, "depth", seed),
            generate_for_scene(model, dataset, split, i, "seg", seed),
            composite,
        ]
        for j, panel in enumerate(panels):
            grid[i * size:(i + 1) * size, j * size:(j + 1) * size] = panel
    save_png(out_path, grid)
    return grid
