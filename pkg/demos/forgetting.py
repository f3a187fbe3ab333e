"""The collapse story in miniature: from one jointly trained checkpoint,
continue with understanding-only updates (the SFT recipe) and with the full
four-task mix, and watch what each does to held-out pixel generation.

Run from the repo root:  python3 demos/forgetting.py
Writes demos/out/forgetting.png with both branch curves.
"""

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from tinyumm.data import SceneDataset, build_dataset
from tinyumm.model import load_checkpoint
from tinyumm.scenes import SceneSpec
from tinyumm.trainer import LossWeights, TrainConfig, Trainer

OUT = Path(__file__).resolve().parent / "out"
WARMUP, BRANCH, EVERY = 1500, 400, 40


def main():
    ds_dir = OUT / "forget_ds"
    if not (ds_dir / "manifest.json").exists():
        print("building 96+24 two-object scenes ...")
        build_dataset(SceneSpec(n_objects=2), n_train=96, n_eval=24,
                      root_seed=21, out_dir=ds_dir)
    dataset = SceneDataset(ds_dir)

    cfg = TrainConfig(
        paradigm="maskgit", d=48, layers=2, heads=4, K=32,
        steps=WARMUP, batch_per_task=8, lr=3e-4,
        text_warmup_steps=10**9, seed=2, data_dir=str(ds_dir),
    )
    print(f"joint warmup, {WARMUP} steps ...")
    warm = Trainer(cfg, dataset)
    warm.run(weights=LossWeights(1, 1, 1, 1), n_steps=WARMUP)
    warm.save(OUT / "forget_ckpt")
    base = warm.eval_task_loss("pixel")
    print(f"held-out pixel loss at the branch point: {base:.4f}")

    curves = {}
    for name, weights in (("understanding-only", LossWeights(0, 0, 0, 1)),
                          ("joint", LossWeights(1, 1, 1, 1))):
        model, opt_state, step, _ = load_checkpoint(OUT / "forget_ckpt")
        t = Trainer(cfg, dataset, model=model, optimizer_state=opt_state,
                    start_step=step)
        curve = [(t.step, base)]

        def on_step(tr, report):
            if tr.step % EVERY == 0:
                curve.append((tr.step, tr.eval_task_loss("pixel")))

        t.run(weights=weights, n_steps=BRANCH, on_step=on_step)
        end = curve[-1][1]
        print(f"{name:19s} after {BRANCH} steps: {end:.4f} "
              f"({(end / base - 1.0) * 100:+.1f}% vs branch point)")
        curves[name] = curve

    fig, ax = plt.subplots(figsize=(6, 4))
    for name, curve in curves.items():
        ax.plot([s for s, _ in curve], [v for _, v in curve],
                marker="o", markersize=3, label=name)
    ax.set_xlabel("step")
    ax.set_ylabel("held-out pixel generation loss")
    ax.set_title("what the update mix does to generation")
    ax.legend()
    fig.tight_layout()
    fig.savefig(OUT / "forgetting.png")
    print(f"curves: {OUT / 'forgetting.png'}")
    print("dropping the generation terms erodes generation within a few "
          "hundred steps; keeping all four terms holds it (and the deeper "
          "the warmup converged, the flatter the joint curve).")


if __name__ == "__main__":
    main()
