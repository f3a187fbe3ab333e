"""Command-line entry point: dataset construction, training, evaluation,
sample generation, and the four-row ablation, with one config story.

Exit codes: 0 success, 1 runtime failure, 2 configuration error. Every
command writes resolved_config.json into its output directory so a run is
reproducible from that file alone.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import evalsuite
from .common import ConfigError, save_png, sha256_file, write_json
from .config import SCHEMAS, default_out_dir, parse_config_file, \
    parse_set_overrides, resolve
from .data import SceneDataset, build_dataset
from .model import load_checkpoint
from .scenes import SceneSpec
from .text import GEN_TASKS
from .trainer import TrainConfig, run_ablation, run_training

TABLE_COLUMNS = ("vqa_spatial", "vqa_presence", "vqa_attribute",
                 "depth_sim", "seg_sim", "recon_mse", "comp_score")

_REPORT_TO_COLUMN = {
    "vqa_spatial": "vqa_spatial_acc",
    "vqa_presence": "vqa_presence_acc",
    "vqa_attribute": "vqa_attribute_acc",
    "depth_sim": "depth_sim",
    "seg_sim": "seg_sim",
    "recon_mse": "recon_mse",
    "comp_score": "comp_score",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tinyumm",
        description="Desk-scale joint training of understanding and "
                    "multi-representation generation on synthetic scenes.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="flat key = value config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override one config key (repeatable)")
        p.add_argument("--seed", type=int, help="override the seed key")
        p.add_argument("--out", help="output directory")

    p_data = sub.add_parser("data", help="build a scene dataset with targets")
    common(p_data)
    p_data.add_argument("--n-train", type=int, help="training scene count")
    p_data.add_argument("--n-eval", type=int, help="held-out scene count")
    p_data.add_argument("--image-size", type=int, help="square image side")
    p_data.add_argument("--n-objects", type=int, help="objects per scene")
    p_data.add_argument("--force", action="store_true",
                        help="overwrite an existing dataset directory")

    p_train = sub.add_parser("train", help="run joint training")
    common(p_train)

    p_eval = sub.add_parser("eval", help="score a checkpoint on a split")
    common(p_eval)
    p_eval.add_argument("--allow-train-eval", action="store_true",
                        help="permit scoring on the training split")
    p_eval.add_argument("--grid", action="store_true",
                        help="also write eval_grid.png")

    p_gen = sub.add_parser("generate", help="sample images from a checkpoint")
    common(p_gen)

    p_abl = sub.add_parser("ablate", help="four-row cumulative task ablation")
    common(p_abl)
    return parser


def resolve_command_config(args) -> dict:
    schema = SCHEMAS[args.command]
    file_layer = parse_config_file(args.config) if args.config else {}
    set_layer = parse_set_overrides(getattr(args, "set", None))
    flag_layer = {}
    for flag, key in (("n_train", "n_train"), ("n_eval", "n_eval"),
                      ("image_size", "image_size"), ("n_objects", "n_objects")):
        v = getattr(args, flag, None)
        if v is not None:
            flag_layer[key] = v
    if args.seed is not None:
        flag_layer["seed"] = args.seed
    if args.out is not None:
        flag_layer["out_dir"] = args.out
    cfg = resolve(schema, file_layer, set_layer, flag_layer)
    if not cfg.get("out_dir"):
        cfg["out_dir"] = default_out_dir(args.command)
    return cfg


def write_resolved(cfg: dict, command: str) -> Path:
    out = Path(cfg["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    write_json(out / "resolved_config.json", {"command": command, **cfg})
    return out


# ============================================================
# Commands
# ============================================================

def cmd_data(args) -> int:
    cfg = resolve_command_config(args)
    out = Path(cfg["out_dir"])
    if (out / "manifest.json").exists() and not args.force:
        raise ConfigError(
            f"dataset already exists at {out}; pass --force to overwrite")
    if cfg["n_train"] < 1 or cfg["n_eval"] < 1:
        raise ConfigError("n_train and n_eval must be >= 1")
    spec = SceneSpec(image_size=cfg["image_size"], n_objects=cfg["n_objects"])
    spec.validate()
    write_resolved(cfg, "data")
    manifest = build_dataset(spec, cfg["n_train"], cfg["n_eval"],
                             root_seed=cfg["seed"], out_dir=out)
    print(f"dataset at {out}: {manifest['n_train']} train + "
          f"{manifest['n_eval']} eval scenes, "
          f"{len(manifest['degenerate_ids'])} degenerate-depth")
    return 0


def cmd_train(args) -> int:
    cfg = resolve_command_config(args)
    train_cfg = TrainConfig.from_dict(cfg)
    train_cfg.validate()
    write_resolved(cfg, "train")
    out = run_training(train_cfg)
    print(f"trained {train_cfg.steps} steps; checkpoint at {out / 'ckpt_final'}")
    return 0


def cmd_eval(args) -> int:
    cfg = resolve_command_config(args)
    if not cfg["ckpt"] or not cfg["data_dir"]:
        raise ConfigError("eval requires ckpt and data_dir")
    if cfg["split"] == "train" and not args.allow_train_eval:
        raise ConfigError(
            "scoring on the training split needs --allow-train-eval")
    model, _, _, manifest = load_checkpoint(cfg["ckpt"])
    vocab_hash = sha256_file(Path(cfg["data_dir"]) / "vocab.json")
    if manifest["vocab_hash"] != vocab_hash:
        raise ConfigError(
            "checkpoint vocab hash does not match the dataset vocab")
    dataset = SceneDataset(cfg["data_dir"])
    out = write_resolved(cfg, "eval")
    n_scenes = cfg["n_scenes"] or None
    report = evalsuite.evaluate(model, dataset, cfg["split"],
                                seed=cfg["seed"], n_scenes=n_scenes)
    write_json(out / "eval_report.json", report.to_dict())
    for key, value in report.to_dict().items():
        print(f"{key} = {'absent' if value is None else value}")
    if args.grid:
        evalsuite.eval_grid(model, dataset, out / "eval_grid.png",
                            rows=cfg["grid_rows"], split_name=cfg["split"],
                            seed=cfg["seed"])
        print(f"grid at {out / 'eval_grid.png'}")
    return 0


def cmd_generate(args) -> int:
    cfg = resolve_command_config(args)
    if not cfg["ckpt"] or not cfg["data_dir"]:
        raise ConfigError("generate requires ckpt and data_dir")
    if cfg["task"] not in GEN_TASKS:
        raise ConfigError(f"task must be one of {GEN_TASKS}, got {cfg['task']!r}")
    if cfg["n"] < 1:
        raise ConfigError("n must be >= 1")
    model, _, _, manifest = load_checkpoint(cfg["ckpt"])
    vocab_hash = sha256_file(Path(cfg["data_dir"]) / "vocab.json")
    if manifest["vocab_hash"] != vocab_hash:
        raise ConfigError(
            "checkpoint vocab hash does not match the dataset vocab")
    dataset = SceneDataset(cfg["data_dir"])
    split = dataset.split(cfg["split"])
    if cfg["n"] > len(split.ids):
        raise ConfigError(f"n exceeds split size {len(split.ids)}")
    out = write_resolved(cfg, "generate")
    for i in range(cfg["n"]):
        image = evalsuite.generate_for_scene(model, dataset, split, i,
                                             cfg["task"], cfg["seed"])
        path = out / f"gen_{cfg['task']}_{split.ids[i]}.png"
        save_png(path, image)
        print(f"wrote {path}")
    return 0


def cmd_ablate(args) -> int:
    cfg = resolve_command_config(args)
    train_cfg = TrainConfig.from_dict(cfg)
    train_cfg.validate()
    out = write_resolved(cfg, "ablate")

    def eval_fn(model, dataset):
        report = evalsuite.evaluate(model, dataset, "eval", seed=train_cfg.seed)
        full = report.to_dict()
        return {col: full[_REPORT_TO_COLUMN[col]] for col in TABLE_COLUMNS}

    result = run_ablation(train_cfg, eval_fn)
    write_json(out / "ablation_table.json", {"rows": result["rows"]})
    text = format_table(result["rows"])
    (out / "ablation_table.txt").write_text(text, encoding="utf-8")
    plot_curves(result["curves"], out / "loss_curves.png")
    print(text, end="")
    print(f"table at {out / 'ablation_table.json'}, "
          f"curves at {out / 'loss_curves.png'}")
    return 0


def format_table(rows) -> str:
    """Text table printing the same float reprs the JSON carries."""
    header = ["row"] + list(TABLE_COLUMNS)
    body = []
    for row in rows:
        cells = [row["name"]]
        for col in TABLE_COLUMNS:
            v = row[col]
            cells.append("absent" if v is None else repr(v))
        body.append(cells)
    widths = [max(len(r[i]) for r in [header] + body) for i in range(len(header))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip()
             for r in [header] + body]
    return "\n".join(lines) + "\n"


def plot_curves(curves: dict, out_path: Path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    fig, ax = plt.subplots(figsize=(6, 4))
    for name, points in curves.items():
        steps = [p[0] for p in points]
        losses = [p[1] for p in points]
        ax.plot(steps, losses, marker="o", markersize=3, label=name)
    ax.set_xlabel("step")
    ax.set_ylabel("held-out pixel generation loss")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_path)
    plt.close(fig)


# ============================================================
# Entry point
# ============================================================

COMMANDS = {
    "data": cmd_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "generate": cmd_generate,
    "ablate": cmd_ablate,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # noqa: BLE001 - the CLI boundary maps to exit 1
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
