"""Dataset construction and loading.

Layout under the dataset root:
  manifest.json              spec, seeds, counts, split ids
  vocab.json                 ordered token list
  prompts/<task>.txt         one prompt per line, task in {pixel, depth, seg}
  scenes/<id>.png            8-bit RGB input image
  depth_raw/<id>.npyless     16-bit grayscale PNG, depth [0,1] -> [0,65535]
  masks/<id>_<k>.png         8-bit instance masks, 0 or 255
  depth_target/<id>.png      8-bit 3-channel normalized depth
  seg_target/<id>.png        8-bit 3-channel boundary map
  meta/<id>.json             objects, caption, qa, seed, degenerate flag

All JSON is UTF-8 with sorted keys; PNG bytes are deterministic, so
rebuilding with identical arguments reproduces identical files.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .common import ConfigError, load_png, read_json, round_half_up, save_png, write_json
from .scenes import Scene, SceneObject, SceneSpec, generate_scene, render
from .targets import boundary_map, normalize_depth
from .text import GEN_TASKS, Vocabulary, load_prompt_pool

MANIFEST_FORMAT = "tinyumm-dataset-v1"


def build_dataset(spec: SceneSpec, n_train: int, n_eval: int, root_seed: int,
                  out_dir: str | Path) -> dict:
    """Write the full on-disk dataset; returns the manifest dict."""
    spec.validate()
    if n_train < 1 or n_eval < 1:
        raise ConfigError(f"n_train and n_eval must be >= 1, got {n_train}, {n_eval}")
    if root_seed < 0:
        raise ConfigError(f"root_seed must be >= 0, got {root_seed}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for sub in ("scenes", "depth_raw", "masks", "depth_target", "seg_target",
                "meta", "prompts"):
        (out / sub).mkdir(exist_ok=True)

    train_seeds = [root_seed + i for i in range(n_train)]
    eval_seeds = [root_seed + n_train + i for i in range(n_eval)]
    if set(train_seeds) & set(eval_seeds):
        raise ConfigError("train and eval seed ranges overlap")

    train_ids = [f"train_{i:05d}" for i in range(n_train)]
    eval_ids = [f"eval_{i:05d}" for i in range(n_eval)]
    degenerate_ids = []

    for sid, seed in zip(train_ids + eval_ids, train_seeds + eval_seeds):
        if _write_scene(spec, seed, sid, out):
            degenerate_ids.append(sid)

    Vocabulary.default().save(out / "vocab.json")
    (out / "prompts").mkdir(exist_ok=True)
    for task in GEN_TASKS:
        pool = load_prompt_pool(task)
        (out / "prompts" / f"{task}.txt").write_text(
            "\n".join(pool.prompts) + "\n", encoding="utf-8"
        )

    manifest = {
        "format": MANIFEST_FORMAT,
        "spec": _spec_to_dict(spec),
        "root_seed": root_seed,
        "n_train": n_train,
        "n_eval": n_eval,
        "train_ids": train_ids,
        "eval_ids": eval_ids,
        "degenerate_ids": degenerate_ids,
    }
    write_json(out / "manifest.json", manifest)
    return manifest


def _write_scene(spec: SceneSpec, seed: int, sid: str, out: Path) -> bool:
    """Render and write one scene; returns the degenerate-depth flag."""
    scene = generate_scene(spec, seed)
    r = render(scene)
    save_png(out / "scenes" / f"{sid}.png", r.rgb)
    depth16 = round_half_up(r.depth_raw * 65535.0).astype(np.uint16)
    save_png(out / "depth_raw" / f"{sid}.npyless", depth16)
    for k, m in enumerate(r.masks):
        save_png(out / "masks" / f"{sid}_{k}.png", np.where(m, 255, 0).astype(np.uint8))
    dt = normalize_depth(r.depth_raw)
    save_png(out / "depth_target" / f"{sid}.png", dt.map)
    st = boundary_map(r.masks, shape=r.depth_raw.shape)
    save_png(out / "seg_target" / f"{sid}.png", st.map)
    write_json(out / "meta" / f"{sid}.json", {
        "caption": r.caption,
        "degenerate_depth": dt.degenerate,
        "objects": [asdict(o) for o in scene.objects],
        "qa": [list(t) for t in r.qa],
        "seed": seed,
    })
    return dt.degenerate


def _spec_to_dict(spec: SceneSpec) -> dict:
    return {
        "image_size": spec.image_size,
        "n_objects": spec.n_objects,
        "shape_vocab": list(spec.shape_vocab),
        "color_vocab": list(spec.color_vocab),
        "depth_layers": list(spec.depth_layers),
        "background_depth": spec.background_depth,
    }


def spec_from_dict(d: dict) -> SceneSpec:
    return SceneSpec(
        image_size=d["image_size"],
        n_objects=d["n_objects"],
        shape_vocab=tuple(d["shape_vocab"]),
        color_vocab=tuple(d["color_vocab"]),
        depth_layers=tuple(d["depth_layers"]),
        background_depth=d["background_depth"],
    )


def scene_from_meta(spec: SceneSpec, meta: dict) -> Scene:
    objs = tuple(SceneObject(**o) for o in meta["objects"])
    return Scene(spec=spec, objects=objs, seed=meta["seed"])


# ============================================================
# Loading
# ============================================================

@dataclass
class LoadedSplit:
    """One split fully resident in memory; index order follows the manifest."""
    ids: list
    rgb: np.ndarray           # [N, H, W, 3] uint8
    depth_target: np.ndarray  # [N, H, W, 3] uint8
    seg_target: np.ndarray    # [N, H, W, 3] uint8
    captions: list
    qa: list                  # per scene, list of (q, a, cat)
    qa_flat: list             # (scene_index, q, a, cat) across the split
    meta: list                # raw meta dicts


class SceneDataset:
    """Read access to a built dataset directory."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        mpath = self.root / "manifest.json"
        if not mpath.exists():
            raise ConfigError(f"no dataset manifest at {mpath}")
        self.manifest = read_json(mpath)
        if self.manifest.get("format") != MANIFEST_FORMAT:
            raise ConfigError(f"unrecognized dataset format in {mpath}")
        self.spec = spec_from_dict(self.manifest["spec"])
        self.vocab = Vocabulary.load(self.root / "vocab.json")
        self.pools = {t: load_prompt_pool(t, self.root / "prompts") for t in GEN_TASKS}
        self._splits = {}

    def split(self, name: str) -> LoadedSplit:
        if name not in ("train", "eval"):
            raise ConfigError(f"split must be train or eval, got {name!r}")
        if name not in self._splits:
            self._splits[name] = self._load(self.manifest[f"{name}_ids"])
        return self._splits[name]

    def _load(self, ids) -> LoadedSplit:
        rgb, dep, seg, captions, qa, qa_flat, metas = [], [], [], [], [], [], []
        for idx, sid in enumerate(ids):
            rgb.append(load_png(self.root / "scenes" / f"{sid}.png"))
            dep.append(load_png(self.root / "depth_target" / f"{sid}.png"))
            seg.append(load_png(self.root / "seg_target" / f"{sid}.png"))
            meta = read_json(self.root / "meta" / f"{sid}.json")
            metas.append(meta)
            captions.append(meta["caption"])
            triples = [tuple(t) for t in meta["qa"]]
            qa.append(triples)
            qa_flat.extend((idx, q, a, c) for q, a, c in triples)
        return LoadedSplit(
            ids=list(ids),
            rgb=np.stack(rgb),
            depth_target=np.stack(dep),
            seg_target=np.stack(seg),
            captions=captions,
            qa=qa,
            qa_flat=qa_flat,
            meta=metas,
        )

    def scene(self, split: str, index: int) -> Scene:
        return scene_from_meta(self.spec, self.split(split).meta[index])
