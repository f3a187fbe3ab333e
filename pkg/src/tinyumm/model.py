"""The toy unified model: understanding encoder producing h, a frozen k-means
VQ tokenizer, a prompt-conditioned transformer backbone, a closed-vocabulary
answer head, and the configured generation head.

All tasks consume the same visual embedding h and differ only in the prompt
and the target-side head, so one model serves understanding and the three
generation tasks simultaneously.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .common import ConfigError, round_half_up, rng_from, sha256_array, write_json, read_json
from . import heads
from .heads import NoiseSchedule, linear_schedule
from .text import Vocabulary, answer_vocab

PARADIGMS = ("ar", "maskgit", "ddpm", "fm", "mar")
DISCRETE = ("ar", "maskgit")

_VQ_TAG = 401
_GEN_TAG = 402


# ============================================================
# Patch plumbing
# ============================================================

def patchify(img: np.ndarray, patch: int) -> np.ndarray:
    """[H, W, 3] -> [L, patch*patch*3] float64, row-major patch order."""
    h, w, _ = img.shape
    if h % patch or w % patch:
        raise ValueError(f"image {h}x{w} not divisible by patch {patch}")
    a = np.asarray(img, dtype=np.float64)
    a = a.reshape(h // patch, patch, w // patch, patch, 3)
    return a.transpose(0, 2, 1, 3, 4).reshape(-1, patch * patch * 3)


def unpatchify(flat: np.ndarray, patch: int, image_size: int) -> np.ndarray:
    """Inverse of patchify back to [H, W, 3] float64."""
    g = image_size // patch
    a = flat.reshape(g, g, patch, patch, 3).transpose(0, 2, 1, 3, 4)
    return a.reshape(image_size, image_size, 3)


def latent_of(img: np.ndarray, patch: int) -> np.ndarray:
    """Patches scaled to [-1, 1]."""
    return patchify(img, patch) / 127.5 - 1.0


def image_of_latent(lat: np.ndarray, patch: int, image_size: int) -> np.ndarray:
    """[-1, 1] latent back to a uint8 image, clipped."""
    px = round_half_up((np.asarray(lat, dtype=np.float64) + 1.0) * 127.5)
    return unpatchify(np.clip(px, 0, 255), patch, image_size).astype(np.uint8)


# ============================================================
# Toy VQ tokenizer
# ============================================================

class ToyVQ:
    """Nearest-centroid patch quantizer with a k-means codebook, frozen
    after fitting. The codebook lives in raw pixel units [0, 255]."""

    def __init__(self, patch: int, codebook: np.ndarray):
        codebook = np.asarray(codebook, dtype=np.float64)
        if codebook.ndim != 2 or codebook.shape[0] < 2:
            raise ValueError("codebook must be [K, p] with K >= 2")
        if codebook.shape[1] != patch * patch * 3:
            raise ValueError("codebook width does not match patch size")
        self.patch = patch
        self.codebook = codebook
        self.codebook.setflags(write=False)
        self.frozen = True

    @property
    def K(self) -> int:
        return self.codebook.shape[0]

    def encode(self, img: np.ndarray) -> np.ndarray:
        """Nearest centroid per patch (Euclidean, ties to the lowest index)."""
        x = patchify(img, self.patch)
        d2 = ((x[:, None, :] - self.codebook[None, :, :]) ** 2).sum(-1)
        return np.argmin(d2, axis=1).astype(np.int64)

    def decode(self, ids: np.ndarray, image_size: int) -> np.ndarray:
        """Concatenated centroids, float64 pixel units."""
        ids = np.asarray(ids)
        if np.any(ids < 0) or np.any(ids >= self.K):
            raise ValueError(f"code id out of range [0, {self.K})")
        return unpatchify(self.codebook[ids], self.patch, image_size)

    def decode_u8(self, ids: np.ndarray, image_size: int) -> np.ndarray:
        return np.clip(round_half_up(self.decode(ids, image_size)), 0, 255).astype(np.uint8)


def vq_fit(images, patch: int, K: int, seed: int, max_points: int = 32768,
           iters: int = 50) -> ToyVQ:
    """k-means (++ init, Lloyd) on patches pooled from `images`."""
    pts = np.concatenate([patchify(im, patch) for im in images], axis=0)
    rng = rng_from(_VQ_TAG, seed)
    if len(pts) > max_points:
        pts = pts[rng.permutation(len(pts))[:max_points]]
    if len(pts) < K:
        raise ValueError(f"need at least K={K} patches to fit, got {len(pts)}")

    # k-means++ seeding
    centers = np.empty((K, pts.shape[1]), dtype=np.float64)
    centers[0] = pts[int(rng.integers(len(pts)))]
    d2 = ((pts - centers[0]) ** 2).sum(-1)
    for k in range(1, K):
        total = d2.sum()
        if total <= 0:
            centers[k] = pts[int(rng.integers(len(pts)))]
        else:
            centers[k] = pts[int(rng.choice(len(pts), p=d2 / total))]
        d2 = np.minimum(d2, ((pts - centers[k]) ** 2).sum(-1))

    assign = np.full(len(pts), -1)
    for _ in range(iters):
        d2all = ((pts[:, None, :] - centers[None, :, :]) ** 2).sum(-1)
        new_assign = np.argmin(d2all, axis=1)
        if np.array_equal(new_assign, assign):
            break
        assign = new_assign
        for k in range(K):
            sel = assign == k
            if sel.any():
                centers[k] = pts[sel].mean(axis=0)
            else:
                # revive an empty cluster at the point farthest from its center
                worst = int(np.argmax(d2all[np.arange(len(pts)), assign]))
                centers[k] = pts[worst]
    return ToyVQ(patch=patch, codebook=centers)


# ============================================================
# Config
# ============================================================

@dataclass(frozen=True)
class ModelConfig:
    paradigm: str = "maskgit"
    shared_encoder: bool = True
    d: int = 128
    layers: int = 4
    heads: int = 4
    K: int = 64
    patch: int = 4
    seed: int = 0
    enc_layers: int = 2
    image_size: int = 32
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

    def validate(self) -> None:
        if self.paradigm not in PARADIGMS:
            raise ConfigError(f"paradigm must be one of {PARADIGMS}, got {self.paradigm!r}")
        for key in ("d", "layers", "heads", "K", "patch", "enc_layers",
                    "image_size", "prompt_len", "T", "mar_head_layers",
                    "mar_sample_steps", "fm_sample_steps", "maskgit_iters"):
            if getattr(self, key) <= 0:
                raise ConfigError(f"{key} must be positive")
        if self.d % self.heads:
            raise ConfigError(f"d={self.d} not divisible by heads={self.heads}")
        if self.image_size % self.patch:
            raise ConfigError("image_size must be divisible by patch")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")

    @property
    def torch_dtype(self):
        return torch.float32 if self.dtype == "float32" else torch.float64

    @property
    def n_patches(self) -> int:
        return (self.image_size // self.patch) ** 2

    @property
    def p_dim(self) -> int:
        return self.patch * self.patch * 3


# ============================================================
# Transformer pieces
# ============================================================

class Block(nn.Module):
    def __init__(self, d: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.norm1 = nn.LayerNorm(d)
        self.qkv = nn.Linear(d, 3 * d)
        self.proj = nn.Linear(d, d)
        self.norm2 = nn.LayerNorm(d)
        self.fc1 = nn.Linear(d, 4 * d)
        self.fc2 = nn.Linear(4 * d, d)

    def forward(self, x: torch.Tensor, allowed=None) -> torch.Tensor:
        # x: [B, S, d]; allowed: bool [B, 1, S, S], True where attention may look
        B, S, d = x.shape
        h = self.norm1(x)
        qkv = self.qkv(h).reshape(B, S, 3, self.n_heads, d // self.n_heads)
        q, k, v = (qkv[:, :, i].transpose(1, 2) for i in range(3))
        o = F.scaled_dot_product_attention(q, k, v, attn_mask=allowed)
        x = x + self.proj(o.transpose(1, 2).reshape(B, S, d))
        x = x + self.fc2(F.gelu(self.fc1(self.norm2(x))))
        return x


def time_features(tau: torch.Tensor, d: int) -> torch.Tensor:
    """Sinusoidal features of a time in [0, 1], [B] -> [B, d]."""
    half = d // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=tau.dtype) / half)
    arg = tau[:, None] * 1000.0 * freqs[None, :]
    return torch.cat([torch.sin(arg), torch.cos(arg)], dim=1)


# ============================================================
# The model
# ============================================================

class UMM(nn.Module):
    def __init__(self, cfg: ModelConfig, vocab: Vocabulary, vq: ToyVQ | None = None):
        cfg.validate()
        if cfg.paradigm in DISCRETE and vq is None:
            raise ConfigError(f"paradigm {cfg.paradigm!r} needs a fitted VQ codebook")
        super().__init__()
        self.cfg = cfg
        self.vocab = vocab
        self.vq = vq
        self.answers = answer_vocab()
        self.schedule: NoiseSchedule = linear_schedule(cfg.T, cfg.beta_start, cfg.beta_end)

        torch.manual_seed(cfg.seed)
        d, Lv, Lt, p = cfg.d, cfg.n_patches, cfg.n_patches, cfg.p_dim

        # understanding encoder
        self.patch_embed = nn.Linear(p, d)
        self.enc_pos = nn.Parameter(torch.zeros(1, Lv, d))
        nn.init.normal_(self.enc_pos, std=0.02)
        self.enc_blocks = nn.ModuleList(Block(d, cfg.heads) for _ in range(cfg.enc_layers))
        self.enc_norm = nn.LayerNorm(d)

        # text side
        self.tok_embed = nn.Embedding(len(vocab), d)
        self.prompt_pos = nn.Parameter(torch.zeros(1, cfg.prompt_len, d))
        nn.init.normal_(self.prompt_pos, std=0.02)
        self.answer_head = nn.Linear(d, len(self.answers))

        # shared backbone
        self.blocks = nn.ModuleList(Block(d, cfg.heads) for _ in range(cfg.layers))
        self.out_norm = nn.LayerNorm(d)
        self.tgt_pos = nn.Parameter(torch.zeros(1, Lt, d))
        nn.init.normal_(self.tgt_pos, std=0.02)

        # generation head for the configured paradigm
        if cfg.paradigm in DISCRETE:
            self.code_embed = nn.Embedding(cfg.K, d)
            self.code_head = nn.Linear(d, cfg.K)
            if cfg.paradigm == "ar":
                self.boi = nn.Parameter(torch.zeros(d))
                nn.init.normal_(self.boi, std=0.02)
            else:
                self.mask_embed = nn.Parameter(torch.zeros(d))
                nn.init.normal_(self.mask_embed, std=0.02)
        else:
            self.lat_in = nn.Linear(p, d)
            self.lat_out = nn.Linear(d, p)
            self.time_fc1 = nn.Linear(d, d)
            self.time_fc2 = nn.Linear(d, d)
            if cfg.paradigm == "mar":
                self.mar_query = nn.Parameter(torch.zeros(d))
                nn.init.normal_(self.mar_query, std=0.02)
                self.head_in = nn.Linear(p, d)
                self.head_blocks = nn.ModuleList(
                    nn.Sequential(nn.LayerNorm(d), nn.Linear(d, d), nn.GELU())
                    for _ in range(cfg.mar_head_layers)
                )
                self.head_out = nn.Linear(d, p)

        self.to(cfg.torch_dtype)
        if not cfg.shared_encoder:
            for prm in self.encoder_parameters():
                prm.requires_grad_(False)

    # -------------------- parameter groups --------------------

    def encoder_parameters(self):
        mods = [self.patch_embed, self.enc_blocks, self.enc_norm]
        out = [self.enc_pos]
        for m in mods:
            out += list(m.parameters())
        return out

    def text_parameters(self):
        return [self.tok_embed.weight, self.answer_head.weight, self.answer_head.bias]

    def set_text_frozen(self, frozen: bool) -> None:
        for prm in self.text_parameters():
            prm.requires_grad_(not frozen)

    # -------------------- encoder --------------------

    def encode_understanding(self, images: np.ndarray) -> torch.Tensor:
        """uint8 [B, H, W, 3] -> h [B, Lv, d]."""
        lat = np.stack([latent_of(im, self.cfg.patch) for im in images])
        x = torch.from_numpy(lat).to(self.cfg.torch_dtype)
        x = self.patch_embed(x) + self.enc_pos
        for blk in self.enc_blocks:
            x = blk(x)
        return self.enc_norm(x)

    # -------------------- prompt plumbing --------------------

    def prompt_ids(self, text: str, task: str) -> np.ndarray:
        """Tokenize and pad a prompt or question to prompt_len."""
        ids = self.vocab.encode(text)
        if self.cfg.task_token:
            ids = [self.vocab.task_token_id(task)] + ids
        if len(ids) > self.cfg.prompt_len:
            raise ConfigError(f"prompt longer than prompt_len={self.cfg.prompt_len}: {text!r}")
        return np.asarray(ids + [self.vocab.pad] * (self.cfg.prompt_len - len(ids)),
                          dtype=np.int64)

    def _embed_prompt(self, prompt: torch.Tensor) -> tuple:
        emb = self.tok_embed(prompt) + self.prompt_pos
        return emb, prompt != self.vocab.pad

    def _run(self, x: torch.Tensor, allowed=None) -> torch.Tensor:
        for blk in self.blocks:
            x = blk(x, allowed)
        return self.out_norm(x)

    @staticmethod
    def _bidir_mask(valid: torch.Tensor) -> torch.Tensor:
        # valid: [B, S] -> allowed [B, 1, S, S]; padded keys are never looked at
        return valid[:, None, None, :].expand(-1, 1, valid.shape[1], -1)

    # -------------------- understanding --------------------

    def answer_logits(self, h: torch.Tensor, prompt: torch.Tensor) -> torch.Tensor:
        """h [B, Lv, d] + question ids [B, P] -> logits [B, n_answers],
        read at each question's <eos> position."""
        B, Lv, _ = h.shape
        emb, pvalid = self._embed_prompt(prompt)
        x = torch.cat([h, emb], dim=1)
        valid = torch.cat([torch.ones(B, Lv, dtype=torch.bool), pvalid], dim=1)
        out = self._run(x, self._bidir_mask(valid))
        eos_at = Lv + pvalid.sum(dim=1) - 1
        return self.answer_head(out[torch.arange(B), eos_at])

    # -------------------- generation losses --------------------

    def gen_loss(self, h: torch.Tensor, prompt: torch.Tensor,
                 targets: np.ndarray, rng: np.random.Generator) -> torch.Tensor:
        """Paradigm loss for target images uint8 [B, H, W, 3]; all sampling
        randomness (t, noise, masks, orders) is drawn from `rng`."""
        p = self.cfg.paradigm
        if p == "ar":
            return self._ar_loss(h, prompt, self._code_ids(targets))
        if p == "maskgit":
            ids = self._code_ids(targets)
            B, L = ids.shape
            visible = torch.from_numpy(
                np.stack([heads.sample_maskgit_pattern(L, rng) for _ in range(B)])
            )
            logits = self._maskgit_logits(h, prompt, ids, visible)
            return heads.maskgit_loss(logits, ids, visible)
        x0 = self._latents(targets)
        B, L, pd = x0.shape
        if p == "ddpm":
            t = rng.integers(1, self.cfg.T + 1, size=B)
            eps = torch.from_numpy(rng.standard_normal((B, L, pd))).to(x0.dtype)
            x_t = heads.ddpm_q_sample(x0, torch.from_numpy(t), eps, self.schedule)
            pred = self._denoise(h, prompt, x_t, torch.from_numpy(t).to(x0.dtype) / self.cfg.T)
            return heads.ddpm_loss(pred, eps)
        if p == "fm":
            t = rng.random(B)
            noise = torch.from_numpy(rng.standard_normal((B, L, pd))).to(x0.dtype)
            psi = heads.fm_interpolate(noise, x0, torch.from_numpy(t).to(x0.dtype))
            pred = self._denoise(h, prompt, psi, torch.from_numpy(t).to(x0.dtype))
            return heads.fm_loss(pred, noise, x0)
        if p == "mar":
            order = np.stack([rng.permutation(L) for _ in range(B)])
            prefix_len = rng.integers(0, L, size=B)
            k = rng.integers(1, self.cfg.T + 1, size=B)
            eps = torch.from_numpy(rng.standard_normal((B, pd))).to(x0.dtype)
            self._mar_ctx = (h, prompt)
            try:
                return heads.mar_loss(self, x0, torch.from_numpy(order),
                                      torch.from_numpy(prefix_len),
                                      torch.from_numpy(k), eps, self.schedule)
            finally:
                self._mar_ctx = None
        raise ConfigError(f"unknown paradigm {p!r}")

    def _code_ids(self, targets: np.ndarray) -> torch.Tensor:
        ids = np.stack([self.vq.encode(im) for im in targets])
        return torch.from_numpy(ids)

    def _latents(self, targets: np.ndarray) -> torch.Tensor:
        lat = np.stack([latent_of(im, self.cfg.patch) for im in targets])
        return torch.from_numpy(lat).to(self.cfg.torch_dtype)

    def _ar_loss(self, h, prompt, ids) -> torch.Tensor:
        logits = self._ar_logits(h, prompt, ids)
        return heads.causal_nll(logits, ids)

    def _ar_logits(self, h, prompt, ids) -> torch.Tensor:
        """Teacher-forced logits for every target position under a prefix-LM
        mask: [h ; prompt] attends only to itself, targets attend to the
        prefix and causally to earlier targets."""
        B, Lv, d = h.shape
        emb, pvalid = self._embed_prompt(prompt)
        L = ids.shape[1]
        tok = self.code_embed(ids[:, :-1]) + self.tgt_pos[:, 1:L]
        first = (self.boi + self.tgt_pos[0, 0]).expand(B, 1, d)
        x = torch.cat([h, emb, first, tok], dim=1)

        valid = torch.cat([torch.ones(B, Lv, dtype=torch.bool), pvalid,
                           torch.ones(B, L, dtype=torch.bool)], dim=1)
        allowed = self._bidir_mask(valid).clone()
        npre = Lv + self.cfg.prompt_len
        allowed[:, :, :npre, npre:] = False                       # prefix never sees targets
        tri = torch.tril(torch.ones(L, L, dtype=torch.bool))
        allowed[:, :, npre:, npre:] &= tri                        # causal within targets
        out = self._run(x, allowed)
        return self.code_head(out[:, npre:])

    def _maskgit_logits(self, h, prompt, ids, visible) -> torch.Tensor:
        B, Lv, d = h.shape
        emb, pvalid = self._embed_prompt(prompt)
        ce = self.code_embed(ids)
        tok = torch.where(visible[:, :, None], ce, self.mask_embed.expand_as(ce))
        x = torch.cat([h, emb, tok + self.tgt_pos], dim=1)
        valid = torch.cat([torch.ones(B, Lv, dtype=torch.bool), pvalid,
                           torch.ones(B, ids.shape[1], dtype=torch.bool)], dim=1)
        out = self._run(x, self._bidir_mask(valid))
        return self.code_head(out[:, Lv + self.cfg.prompt_len:])

    def _time_emb(self, tau: torch.Tensor) -> torch.Tensor:
        tf = time_features(tau.to(self.cfg.torch_dtype), self.cfg.d)
        return self.time_fc2(F.silu(self.time_fc1(tf)))

    def _denoise(self, h, prompt, x_t, tau) -> torch.Tensor:
        """Continuous-head trunk: predict per-position vectors from a noisy
        latent block conditioned on [h ; prompt] and the time tau [B]."""
        B, Lv, d = h.shape
        emb, pvalid = self._embed_prompt(prompt)
        te = self._time_emb(tau)[:, None, :]
        tok = self.lat_in(x_t) + self.tgt_pos + te
        x = torch.cat([h, emb, tok], dim=1)
        valid = torch.cat([torch.ones(B, Lv, dtype=torch.bool), pvalid,
                           torch.ones(B, x_t.shape[1], dtype=torch.bool)], dim=1)
        out = self._run(x, self._bidir_mask(valid))
        return self.lat_out(out[:, Lv + self.cfg.prompt_len:])

    # -------------------- MAR --------------------

    _mar_ctx = None

    def mar_predict(self, z_k: torch.Tensor, k, z: torch.Tensor,
                    order: torch.Tensor, prefix_len: torch.Tensor) -> torch.Tensor:
        """Noise prediction for the token at order[prefix_len], conditioned on
        the clean prefix tokens only. Requires h and prompt set via _mar_ctx."""
        h, prompt = self._mar_ctx
        c = self._mar_cond(h, prompt, z, order, prefix_len)
        k = torch.as_tensor(k, dtype=torch.int64).reshape(-1)
        if k.numel() == 1:
            k = k.expand(z_k.shape[0])
        te = self._time_emb(k.to(self.cfg.torch_dtype) / self.cfg.T)
        u = self.head_in(z_k) + te + c
        for blk in self.head_blocks:
            u = u + blk(u)
        return self.head_out(u)

    def _mar_cond(self, h, prompt, z, order, prefix_len) -> torch.Tensor:
        """Trunk pass over [h ; prompt ; clean prefix ; query], output at the
        query. Prefix rows are right-padded per sample and masked out."""
        B, Lv, d = h.shape
        L = z.shape[1]
        emb, pvalid = self._embed_prompt(prompt)
        max_pre = int(prefix_len.max())
        cur = order.gather(1, prefix_len.view(-1, 1)).squeeze(1)

        zproj = self.lat_in(z) + self.tgt_pos.expand(B, -1, -1)
        seq = torch.zeros(B, max_pre + 1, d, dtype=h.dtype)
        seq_valid = torch.zeros(B, max_pre + 1, dtype=torch.bool)
        for b in range(B):
            n = int(prefix_len[b])
            if n:
                seq[b, :n] = zproj[b, order[b, :n]]
            seq[b, n] = self.mar_query + self.tgt_pos[0, cur[b]]
            seq_valid[b, : n + 1] = True
        x = torch.cat([h, emb, seq], dim=1)
        valid = torch.cat([torch.ones(B, Lv, dtype=torch.bool), pvalid, seq_valid], dim=1)
        out = self._run(x, self._bidir_mask(valid))
        base = Lv + self.cfg.prompt_len
        return out[torch.arange(B), base + prefix_len]

    # -------------------- sampling --------------------

    def generate(self, h: torch.Tensor, prompt: torch.Tensor, seed: int) -> np.ndarray:
        """One uint8 [H, W, 3] image from a single-scene h [1, Lv, d]."""
        cfg = self.cfg
        L = cfg.n_patches
        p = cfg.paradigm
        with torch.no_grad():
            if p == "ar":
                ids = self._ar_decode(h, prompt, L)
                return self.vq.decode_u8(ids, cfg.image_size)
            if p == "maskgit":
                def logits_fn(ids_t, visible):
                    return self._maskgit_logits(h, prompt, ids_t, visible)
                ids = heads.maskgit_decode(logits_fn, L, cfg.K, cfg.maskgit_iters, seed)
                return self.vq.decode_u8(ids[0].numpy(), cfg.image_size)
            if p == "ddpm":
                def eps_fn(x, t):
                    tau = torch.full((1,), t / cfg.T, dtype=x.dtype)
                    return self._denoise(h, prompt, x, tau)
                lat = heads.ddpm_sample(eps_fn, self.schedule, (1, L, cfg.p_dim),
                                        seed, cfg.torch_dtype)
                return image_of_latent(lat[0].numpy(), cfg.patch, cfg.image_size)
            if p == "fm":
                def v_fn(x, t):
                    tau = torch.full((1,), t, dtype=x.dtype)
                    return self._denoise(h, prompt, x, tau)
                lat = heads.fm_sample(v_fn, (1, L, cfg.p_dim), cfg.fm_sample_steps,
                                      seed, cfg.torch_dtype)
                return image_of_latent(lat[0].numpy(), cfg.patch, cfg.image_size)
            if p == "mar":
                lat = self._mar_decode(h, prompt, seed)
                return image_of_latent(lat, cfg.patch, cfg.image_size)
        raise ConfigError(f"unknown paradigm {p!r}")

    def _ar_decode(self, h, prompt, L) -> np.ndarray:
        """Greedy left-to-right decoding (argmax at each step)."""
        ids = torch.zeros(1, L, dtype=torch.int64)
        for i in range(L):
            logits = self._ar_logits(h, prompt, ids)
            ids[0, i] = int(logits[0, i].argmax())
        return ids[0].numpy()

    def _mar_decode(self, h, prompt, seed: int) -> np.ndarray:
        """Token-by-token generation in a seeded random order; each token runs
        the per-token reverse diffusion chain of the MAR head."""
        cfg = self.cfg
        L, pd, T = cfg.n_patches, cfg.p_dim, cfg.T
        rng = rng_from(_GEN_TAG, seed)
        order = torch.from_numpy(rng.permutation(L))[None, :]
        z = torch.zeros(1, L, pd, dtype=cfg.torch_dtype)
        sched = self.schedule
        step_ts = np.unique(np.linspace(1, T, cfg.mar_sample_steps).astype(int))[::-1]
        for i in range(L):
            pl = torch.tensor([i])
            c = self._mar_cond(h, prompt, z, order, pl)
            x = torch.from_numpy(rng.standard_normal(pd))[None, :].to(cfg.torch_dtype)
            for t in step_ts:
                te = self._time_emb(torch.full((1,), t / T, dtype=cfg.torch_dtype))
                u = self.head_in(x) + te + c
                for blk in self.head_blocks:
                    u = u + blk(u)
                eps_hat = self.head_out(u)
                a, abar = sched.alpha[t - 1], sched.alpha_bar[t - 1]
                x = (x - sched.beta[t - 1] / math.sqrt(1 - abar) * eps_hat) / math.sqrt(a)
                if t > 1:
                    noise = torch.from_numpy(rng.standard_normal(pd))[None, :].to(cfg.torch_dtype)
                    x = x + math.sqrt(sched.posterior_var[t - 1]) * noise
            z[0, order[0, i]] = x[0]
        return z[0].numpy()

    def param_count(self) -> int:
        return sum(p.numel() for p in self.parameters())


# ============================================================
# Checkpoints
# ============================================================

def save_checkpoint(ckpt_dir: str | Path, model: UMM, optimizer_state, step: int,
                    vocab_hash: str, extra: dict | None = None) -> None:
    ckpt_dir = Path(ckpt_dir)
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    cfg = model.cfg
    codebook_hash = sha256_array(model.vq.codebook) if model.vq is not None else None
    blob = {
        "config": asdict(cfg),
        "state_dict": model.state_dict(),
        "optimizer_state": optimizer_state,
        "step": step,
        "codebook": None if model.vq is None else model.vq.codebook.copy(),
        "schedule": model.schedule.to_dict(),
        "vocab_tokens": model.vocab.tokens,
        "extra": extra or {},
    }
    torch.save(blob, ckpt_dir / "model.pt")
    write_json(ckpt_dir / "manifest.json", {
        "config": asdict(cfg),
        "step": step,
        "vocab_hash": vocab_hash,
        "codebook_hash": codebook_hash,
        "schedule": model.schedule.to_dict(),
        "param_count": model.param_count(),
    })


def load_checkpoint(ckpt_dir: str | Path):
    """Returns (model, optimizer_state, step, manifest)."""
    ckpt_dir = Path(ckpt_dir)
    blob = torch.load(ckpt_dir / "model.pt", weights_only=False)
    manifest = read_json(ckpt_dir / "manifest.json")
    cfg = ModelConfig(**blob["config"])
    vocab = Vocabulary(blob["vocab_tokens"])
    vq = None if blob["codebook"] is None else ToyVQ(cfg.patch, blob["codebook"])
    model = UMM(cfg, vocab, vq)
    model.load_state_dict(blob["state_dict"])
    model.schedule = NoiseSchedule.from_dict(blob["schedule"])
    return model, blob["optimizer_state"], blob["step"], manifest
