"""Train the same tiny model under each generation paradigm and sample from
every one of them: causal AR, masked parallel decoding, per-pixel-latent
diffusion, flow matching, and per-token masked autoregression.

Run from the repo root:  python3 demos/paradigm_tour.py
Writes demos/out/paradigms.png (one row of samples per paradigm).
"""

import time
from pathlib import Path

import numpy as np
import torch

from tinyumm.common import save_png
from tinyumm.data import SceneDataset, build_dataset
from tinyumm.model import PARADIGMS
from tinyumm.scenes import SceneSpec
from tinyumm.trainer import LossWeights, TrainConfig, Trainer

OUT = Path(__file__).resolve().parent / "out"


def main():
    ds_dir = OUT / "tour_ds"
    if not (ds_dir / "manifest.json").exists():
        print("building 32+8 scenes ...")
        build_dataset(SceneSpec(), n_train=32, n_eval=8, root_seed=9,
                      out_dir=ds_dir)
    dataset = SceneDataset(ds_dir)
    eval_split = dataset.split("eval")

    strips = []
    for paradigm in PARADIGMS:
        cfg = TrainConfig(
            paradigm=paradigm, d=32, layers=1, heads=2, K=16, T=50,
            mar_sample_steps=16, fm_sample_steps=8, maskgit_iters=6,
            steps=150, batch_per_task=4, lr=3e-4,
            text_warmup_steps=10**9, seed=1, data_dir=str(ds_dir),
        )
        trainer = Trainer(cfg, dataset)
        t0 = time.time()
        reports = trainer.run(weights=LossWeights(1, 0, 0, 1),
                              n_steps=cfg.steps)
        first, last = reports[0].l_pixel, reports[-1].l_pixel
        print(f"{paradigm:8s} l_pixel {first:8.3f} -> {last:8.3f} "
              f"({time.time() - t0:4.0f}s)")

        model = trainer.model
        row = []
        for i in range(4):
            h = model.encode_understanding(eval_split.rgb[i:i + 1])
            prompt = torch.from_numpy(np.expand_dims(
                model.prompt_ids(dataset.pools["pixel"].prompts[0], "pixel"), 0))
            row.append(model.generate(h, prompt, seed=i))
        strips.append(np.concatenate(row, axis=1))

    sheet = np.concatenate(strips, axis=0)
    out = OUT / "paradigms.png"
    save_png(out, sheet)
    print(f"sample sheet (rows follow {', '.join(PARADIGMS)}): {out}")
    print("150 steps only sketches the scenes; the point is that one model "
          "body swaps generation heads without touching the data path.")


if __name__ == "__main__":
    main()
