"""Joint multi-task training: one micro-batch per active task per step, a
weighted loss sum, freezing rules, gradient accumulation, checkpointing,
metrics logging, and the cumulative ablation experiment.

Every source of per-step randomness (scene picks, prompt picks, noise, masks,
orders) is keyed by (seed, step, task, micro), so runs replay exactly and a
resumed run continues bit-identically.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
import torch

from .common import ConfigError, rng_from, sha256_file
from .data import LoadedSplit, SceneDataset
from .model import DISCRETE, ModelConfig, UMM, load_checkpoint, save_checkpoint, vq_fit
from .text import sample_prompt

TASKS = ("pixel", "depth", "seg", "und")

_BATCH_TAG = 501
_NOISE_TAG = 502
_EVAL_LOSS_TAG = 503


# ============================================================
# Config and small types
# ============================================================

@dataclass(frozen=True)
class LossWeights:
    lambda_pixel: float = 1.0
    lambda_depth: float = 1.0
    lambda_seg: float = 1.0
    lambda_und: float = 1.0

    def validate(self) -> None:
        vals = self.as_dict()
        if any(v < 0 for v in vals.values()):
            raise ConfigError("loss weights must be non-negative")
        if all(v == 0 for v in vals.values()):
            raise ConfigError("at least one loss weight must be positive")

    def as_dict(self) -> dict:
        return {"pixel": self.lambda_pixel, "depth": self.lambda_depth,
                "seg": self.lambda_seg, "und": self.lambda_und}

    def active(self) -> list:
        return [t for t in TASKS if self.as_dict()[t] > 0]


@dataclass
class TaskBatch:
    task: str
    images: np.ndarray            # [B, H, W, 3] uint8 inputs
    prompts: np.ndarray           # [B, P] int64 padded token ids
    targets: np.ndarray | None    # gen tasks: [B, H, W, 3] uint8
    answer_ids: np.ndarray | None  # und: [B] int64 into the answer vocabulary
    rng: np.random.Generator      # supplies noise/mask/order draws for this batch


@dataclass
class TrainStepReport:
    step: int
    l_pixel: float | None
    l_depth: float | None
    l_seg: float | None
    l_und: float | None
    l_total: float
    lr: float
    grad_norm: float

    def metrics_line(self) -> dict:
        return {"step": self.step, "l_und": self.l_und, "l_pixel": self.l_pixel,
                "l_depth": self.l_depth, "l_seg": self.l_seg,
                "l_total": self.l_total, "grad_norm": self.grad_norm}


@dataclass(frozen=True)
class TrainConfig:
    # model shape
    paradigm: str = "maskgit"
    shared_encoder: bool = True
    d: int = 128
    layers: int = 4
    heads: int = 4
    K: int = 64
    patch: int = 4
    enc_layers: int = 2
    prompt_len: int = 16
    T: int = 100
    beta_start: float = 1e-4
    beta_end: float = 0.02
    mar_head_layers: int = 2
    mar_sample_steps: int = 100
    fm_sample_steps: int = 20
    maskgit_iters: int = 8
    task_token: bool = False
    dtype: str = "float32"
    # optimization
    steps: int = 2000
    lr: float = 3e-4
    weight_decay: float = 0.0
    clip_norm: float = 1.0          # 0 disables clipping
    accum: int = 1
    batch_per_task: int = 16
    text_warmup_steps: int = 500
    post_phase_pixel_steps: int = 0
    # loss weights
    lambda_pixel: float = 1.0
    lambda_depth: float = 1.0
    lambda_seg: float = 1.0
    lambda_und: float = 1.0
    # run plumbing
    seed: int = 0
    data_dir: str = ""
    out_dir: str = ""
    resume: str = ""
    ckpt_every: int = 0             # 0 means final checkpoint only
    # ablation
    warmup_steps: int = 2000
    row_steps: int = 1000
    eval_every: int = 200

    def validate(self) -> None:
        self.weights().validate()
        if self.steps < 0 or self.accum < 1 or self.batch_per_task < 1:
            raise ConfigError("steps must be >= 0, accum and batch_per_task >= 1")
        if not self.data_dir:
            raise ConfigError("data_dir is required")
        self.model_config(image_size=32).validate()

    def weights(self) -> LossWeights:
        return LossWeights(self.lambda_pixel, self.lambda_depth,
                           self.lambda_seg, self.lambda_und)

    def model_config(self, image_size: int) -> ModelConfig:
        return ModelConfig(
            paradigm=self.paradigm, shared_encoder=self.shared_encoder,
            d=self.d, layers=self.layers, heads=self.heads, K=self.K,
            patch=self.patch, seed=self.seed, enc_layers=self.enc_layers,
            image_size=image_size, prompt_len=self.prompt_len, T=self.T,
            beta_start=self.beta_start, beta_end=self.beta_end,
            mar_head_layers=self.mar_head_layers,
            mar_sample_steps=self.mar_sample_steps,
            fm_sample_steps=self.fm_sample_steps,
            maskgit_iters=self.maskgit_iters, task_token=self.task_token,
            dtype=self.dtype,
        )

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**d)


# ============================================================
# Trainer
# ============================================================

class Trainer:
    def __init__(self, cfg: TrainConfig, dataset: SceneDataset,
                 model: UMM | None = None, optimizer_state=None, start_step: int = 0):
        torch.set_num_threads(1)
        cfg.validate()
        self.cfg = cfg
        self.dataset = dataset
        self.train = dataset.split("train")
        if model is None:
            vq = fit_vq_for(cfg, self.train)
            model = UMM(cfg.model_config(dataset.spec.image_size), dataset.vocab, vq)
        self.model = model
        self.answer_id = {a: i for i, a in enumerate(model.answers)}
        self.step = start_step
        self.opt = torch.optim.AdamW(model.parameters(), lr=cfg.lr,
                                     weight_decay=cfg.weight_decay)
        if optimizer_state is not None:
            self.opt.load_state_dict(optimizer_state)
        self._apply_freezing()

    def _apply_freezing(self) -> None:
        self.model.set_text_frozen(self.step >= self.cfg.text_warmup_steps)

    # -------------------- batches --------------------

    def build_batches(self, step: int, tasks) -> dict:
        """accum micro-batches per task, all randomness keyed by (seed, step)."""
        out = {}
        for task in tasks:
            ti = TASKS.index(task)
            micros = []
            for m in range(self.cfg.accum):
                rng = rng_from(_BATCH_TAG, self.cfg.seed, step, ti, m)
                noise_rng = rng_from(_NOISE_TAG, self.cfg.seed, step, ti, m)
                micros.append(self._one_batch(task, rng, noise_rng, self.train))
            out[task] = micros
        return out

    def _one_batch(self, task: str, rng, noise_rng, split: LoadedSplit) -> TaskBatch:
        B = self.cfg.batch_per_task
        model = self.model
        if task == "und":
            picks = rng.integers(0, len(split.qa_flat), size=B)
            scene_idx = np.array([split.qa_flat[j][0] for j in picks])
            prompts = np.stack([model.prompt_ids(split.qa_flat[j][1], "und") for j in picks])
            answers = np.array([self.answer_id[split.qa_flat[j][2]] for j in picks],
                               dtype=np.int64)
            return TaskBatch(task, split.rgb[scene_idx], prompts, None, answers, noise_rng)
        scene_idx = rng.integers(0, len(split.ids), size=B)
        pool = self.dataset.pools[task]
        prompts = np.stack([
            model.prompt_ids(pool.prompts[int(rng.integers(len(pool.prompts)))], task)
            for _ in range(B)
        ])
        targets = {"pixel": split.rgb, "depth": split.depth_target,
                   "seg": split.seg_target}[task][scene_idx]
        return TaskBatch(task, split.rgb[scene_idx], prompts, targets, None, noise_rng)

    # -------------------- one optimizer step --------------------

    def train_step(self, micro_batches: dict, weights: LossWeights) -> TrainStepReport:
        weights.validate()
        active = weights.active()
        for task in active:
            if task not in micro_batches or not micro_batches[task]:
                raise ConfigError(f"active task {task!r} has no batch")
        n_micro = len(micro_batches[active[0]])
        self.opt.zero_grad(set_to_none=True)
        sums = {t: 0.0 for t in active}
        wmap = weights.as_dict()
        for m in range(n_micro):
            total = None
            for task in active:
                loss = self.task_loss(micro_batches[task][m])
                sums[task] += float(loss.detach())
                term = wmap[task] * loss
                total = term if total is None else total + term
            (total / n_micro).backward()

        trainable = [p for p in self.model.parameters() if p.requires_grad]
        max_norm = self.cfg.clip_norm if self.cfg.clip_norm > 0 else math.inf
        grad_norm = float(torch.nn.utils.clip_grad_norm_(trainable, max_norm))
        self.opt.step()

        per_task = {t: sums[t] / n_micro for t in active}
        for t, v in per_task.items():
            if not math.isfinite(v):
                raise RuntimeError(
                    f"non-finite loss at step {self.step}: "
                    + ", ".join(f"l_{k}={x:.6g}" for k, x in per_task.items())
                )
        l_total = sum(wmap[t] * per_task[t] for t in active)
        report = TrainStepReport(
            step=self.step,
            l_pixel=per_task.get("pixel"), l_depth=per_task.get("depth"),
            l_seg=per_task.get("seg"), l_und=per_task.get("und"),
            l_total=l_total, lr=self.cfg.lr, grad_norm=grad_norm,
        )
        self.step += 1
        self._apply_freezing()
        return report

    def task_loss(self, batch: TaskBatch) -> torch.Tensor:
        model = self.model
        h = model.encode_understanding(batch.images)
        prompts = torch.from_numpy(batch.prompts)
        if batch.task == "und":
            logits = model.answer_logits(h, prompts)
            return torch.nn.functional.cross_entropy(
                logits, torch.from_numpy(batch.answer_ids))
        return model.gen_loss(h, prompts, batch.targets, batch.rng)

    # -------------------- full runs --------------------

    def run(self, weights: LossWeights | None = None, n_steps: int | None = None,
            metrics_path: str | Path | None = None, on_step=None,
            append: bool = False) -> list:
        """Train for n_steps optimizer steps; returns the list of reports."""
        cfg = self.cfg
        weights = weights or cfg.weights()
        n_steps = cfg.steps if n_steps is None else n_steps
        out_dir = Path(cfg.out_dir) if cfg.out_dir else None
        mfile = None
        if metrics_path is not None:
            Path(metrics_path).parent.mkdir(parents=True, exist_ok=True)
            mfile = open(metrics_path, "a" if append else "w", encoding="utf-8")
        reports = []
        try:
            end = self.step + n_steps
            while self.step < end:
                batches = self.build_batches(self.step, weights.active())
                report = self.train_step(batches, weights)
                reports.append(report)
                if mfile is not None:
                    mfile.write(json.dumps(report.metrics_line(), sort_keys=True) + "\n")
                    mfile.flush()
                if on_step is not None:
                    on_step(self, report)
                if (out_dir and cfg.ckpt_every and self.step % cfg.ckpt_every == 0
                        and self.step < end):
                    self.save(out_dir / f"ckpt_{self.step:06d}")
        finally:
            if mfile is not None:
                mfile.close()
        return reports

    def save(self, ckpt_dir: str | Path, extra: dict | None = None) -> None:
        vocab_hash = sha256_file(Path(self.cfg.data_dir) / "vocab.json")
        save_checkpoint(ckpt_dir, self.model, self.opt.state_dict(), self.step,
                        vocab_hash, extra)

    # -------------------- deterministic held-out loss --------------------

    def eval_task_loss(self, task: str, seed: int = 0, split_name: str = "eval") -> float:
        """Mean task loss over the whole split with fixed noise draws; the
        model is untouched (no gradients, no parameter updates)."""
        split = self.dataset.split(split_name)
        return eval_task_loss(self.model, self.dataset, split, task, seed,
                              self.cfg.batch_per_task, self.answer_id)


def eval_task_loss(model: UMM, dataset: SceneDataset, split: LoadedSplit,
                   task: str, seed: int, batch_size: int, answer_id=None) -> float:
    if answer_id is None:
        answer_id = {a: i for i, a in enumerate(model.answers)}
    total, count = 0.0, 0
    if task == "und":
        flat = split.qa_flat
        with torch.no_grad():
            for start in range(0, len(flat), batch_size):
                part = flat[start:start + batch_size]
                h = model.encode_understanding(split.rgb[[f[0] for f in part]])
                prompts = torch.from_numpy(
                    np.stack([model.prompt_ids(q, "und") for _, q, _, _ in part]))
                logits = model.answer_logits(h, prompts)
                ans = torch.from_numpy(
                    np.array([answer_id[a] for _, _, a, _ in part], dtype=np.int64))
                loss = torch.nn.functional.cross_entropy(logits, ans)
                total += float(loss) * len(part)
                count += len(part)
        return total / count
    n = len(split.ids)
    with torch.no_grad():
        for start in range(0, n, batch_size):
            idx = np.arange(start, min(start + batch_size, n))
            rng = rng_from(_EVAL_LOSS_TAG, seed, start)
            h = model.encode_understanding(split.rgb[idx])
            pool = dataset.pools[task]
            prompts = np.stack([
                model.prompt_ids(pool.prompts[int(rng.integers(len(pool.prompts)))], task)
                for _ in idx
            ])
            targets = {"pixel": split.rgb, "depth": split.depth_target,
                       "seg": split.seg_target}[task][idx]
            loss = model.gen_loss(h, torch.from_numpy(prompts), targets, rng)
            total += float(loss) * len(idx)
            count += len(idx)
    return total / count


def fit_vq_for(cfg: TrainConfig, split: LoadedSplit):
    """One shared codebook over pixel, depth and seg target patches. The
    continuous paradigms regress latents directly and need no codebook."""
    if cfg.paradigm not in DISCRETE:
        return None
    images = list(split.rgb) + list(split.depth_target) + list(split.seg_target)
    return vq_fit(images, patch=cfg.patch, K=cfg.K, seed=cfg.seed)


# ============================================================
# Run entry points
# ============================================================

def run_training(cfg: TrainConfig) -> Path:
    """Fresh or resumed training run; writes metrics.jsonl and ckpt_final."""
    cfg.validate()
    if not cfg.out_dir:
        raise ConfigError("out_dir is required")
    dataset = SceneDataset(cfg.data_dir)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)

    model, opt_state, start_step = None, None, 0
    if cfg.resume:
        model, opt_state, start_step, manifest = load_checkpoint(cfg.resume)
        _check_resume_config(cfg, manifest, dataset)
    trainer = Trainer(cfg, dataset, model=model, optimizer_state=opt_state,
                      start_step=start_step)
    remaining = max(0, cfg.steps - start_step)
    trainer.run(n_steps=remaining, metrics_path=out / "metrics.jsonl",
                append=bool(cfg.resume))
    if cfg.post_phase_pixel_steps > 0:
        pixel_only = LossWeights(1.0, 0.0, 0.0, 0.0)
        trainer.run(weights=pixel_only, n_steps=cfg.post_phase_pixel_steps,
                    metrics_path=out / "metrics.jsonl", append=True)
    trainer.save(out / "ckpt_final")
    return out


def _check_resume_config(cfg: TrainConfig, manifest: dict, dataset: SceneDataset) -> None:
    saved = manifest["config"]
    current = asdict(cfg.model_config(dataset.spec.image_size))
    diff = [k for k in current if saved.get(k) != current[k]]
    if diff:
        raise ConfigError(f"resume config mismatch on keys: {', '.join(sorted(diff))}")
    vocab_hash = sha256_file(Path(cfg.data_dir) / "vocab.json")
    if manifest["vocab_hash"] != vocab_hash:
        raise ConfigError("resume vocab hash does not match the dataset")


ABLATION_ROWS = (
    ("und-only", LossWeights(0.0, 0.0, 0.0, 1.0)),
    ("+pixel", LossWeights(1.0, 0.0, 0.0, 1.0)),
    ("+depth", LossWeights(1.0, 1.0, 0.0, 1.0)),
    ("+seg", LossWeights(1.0, 1.0, 1.0, 1.0)),
)


def run_ablation(cfg: TrainConfig, eval_fn) -> dict:
    """Warm up one checkpoint jointly (pixel + und), then train each ablation
    row from it with a common seed. `eval_fn(model, dataset) -> dict` scores a
    row's final model; rows also log held-out pixel loss every eval_every steps.

    Returns {"rows": [...], "curves": {...}, "warmup_dir": ...}.
    """
    cfg.validate()
    if not cfg.out_dir:
        raise ConfigError("out_dir is required")
    dataset = SceneDataset(cfg.data_dir)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)

    warm = Trainer(cfg, dataset)
    warm_weights = LossWeights(1.0, 0.0, 0.0, 1.0)
    warm.run(weights=warm_weights, n_steps=cfg.warmup_steps,
             metrics_path=out / "warmup" / "metrics.jsonl")
    warm.save(out / "warmup" / "ckpt")

    rows, curves = [], {}
    for name, weights in ABLATION_ROWS:
        row_dir = out / f"row_{name.replace('+', 'plus_')}"
        model, opt_state, start_step, _ = load_checkpoint(out / "warmup" / "ckpt")
        t = Trainer(cfg, dataset, model=model, optimizer_state=opt_state,
                    start_step=start_step)
        curve = [(t.step, t.eval_task_loss("pixel"))]

        def on_step(tr, report):
            if tr.step % cfg.eval_every == 0:
                curve.append((tr.step, tr.eval_task_loss("pixel")))

        t.run(weights=weights, n_steps=cfg.row_steps,
              metrics_path=row_dir / "metrics.jsonl", on_step=on_step)
        if curve[-1][0] != t.step:
            curve.append((t.step, t.eval_task_loss("pixel")))
        t.save(row_dir / "ckpt")
        scores = eval_fn(t.model, dataset)
        rows.append({"name": name, **scores})
        curves[name] = curve
    return {"rows": rows, "curves": curves, "warmup_dir": str(out / "warmup")}
