"""Generation objectives and samplers: causal AR, MaskGit, DDPM, flow
matching, and per-token MAR diffusion, all interchangeable over one backbone.

Tensor conventions (strict, asserted):
  token logits  [B, L, K]     discrete ids  [B, L] int64 in [0, K)
  latents       [B, L, p]     visibility    [B, L] bool, True = visible
Squared-error losses sum over non-batch dims and average over the batch, so
with a unit-Gaussian target and a zero predictor the expected loss equals the
latent dimension.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .common import rng_from

_SAMPLE_TAG = 301


# ============================================================
# Noise schedule
# ============================================================

@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    beta: np.ndarray           # [T] float64, beta[t-1] is the step-t variance
    alpha: np.ndarray          # 1 - beta
    alpha_bar: np.ndarray      # cumulative product of alpha
    posterior_var: np.ndarray  # beta tilde

    def validate(self) -> None:
        if self.T < 1 or len(self.beta) != self.T:
            raise ValueError("schedule length mismatch")
        if not (np.all(self.beta > 0) and np.all(self.beta < 1)):
            raise ValueError("beta must lie in (0, 1)")
        if not np.all(np.diff(self.alpha_bar) < 0):
            raise ValueError("alpha_bar must be strictly decreasing")

    def to_dict(self) -> dict:
        return {"T": self.T, "beta": self.beta.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "NoiseSchedule":
        return make_schedule(np.asarray(d["beta"], dtype=np.float64))


def make_schedule(beta: np.ndarray) -> NoiseSchedule:
    beta = np.asarray(beta, dtype=np.float64)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    prev = np.concatenate([[1.0], alpha_bar[:-1]])
    posterior_var = (1.0 - prev) / (1.0 - alpha_bar) * beta
    sched = NoiseSchedule(T=len(beta), beta=beta, alpha=alpha,
                          alpha_bar=alpha_bar, posterior_var=posterior_var)
    sched.validate()
    return sched


def linear_schedule(T: int = 100, beta_start: float = 1e-4,
                    beta_end: float = 0.02) -> NoiseSchedule:
    return make_schedule(np.linspace(beta_start, beta_end, T))


def _gather(table: np.ndarray, t, ref: torch.Tensor) -> torch.Tensor:
    """table[t-1] as a tensor broadcastable against ref [B, ...]."""
    t = torch.as_tensor(t, dtype=torch.int64)
    if torch.any(t < 1) or torch.any(t > len(table)):
        raise ValueError(f"t must lie in [1, {len(table)}]")
    vals = torch.from_numpy(table)[t - 1].to(ref.dtype)
    if vals.ndim == 0:
        return vals
    return vals.reshape(-1, *([1] * (ref.ndim - 1)))


# ============================================================
# Losses
# ============================================================

def _check_tokens(logits: torch.Tensor, tokens: torch.Tensor) -> None:
    if logits.ndim != 3 or tokens.ndim != 2 or logits.shape[:2] != tokens.shape:
        raise ValueError(f"expected [B, L, K] logits and [B, L] tokens, "
                         f"got {tuple(logits.shape)} and {tuple(tokens.shape)}")
    K = logits.shape[-1]
    if torch.any(tokens < 0) or torch.any(tokens >= K):
        raise ValueError(f"token id out of range [0, {K})")


def causal_nll(logits: torch.Tensor, tokens: torch.Tensor) -> torch.Tensor:
    """Mean next-token negative log-likelihood. The caller must produce
    logits[:, i] from tokens strictly before i (the backbone's causal mask)."""
    _check_tokens(logits, tokens)
    K = logits.shape[-1]
    return F.cross_entropy(logits.reshape(-1, K), tokens.reshape(-1))


def maskgit_loss(logits: torch.Tensor, tokens: torch.Tensor,
                 visible: torch.Tensor) -> torch.Tensor:
    """Mean cross-entropy over masked positions; visible ones contribute zero."""
    _check_tokens(logits, tokens)
    if visible.shape != tokens.shape or visible.dtype != torch.bool:
        raise ValueError("visible must be a [B, L] bool tensor")
    if bool(visible.all(dim=1).any()):
        raise ValueError("a sample has no masked positions; nothing to supervise")
    masked = ~visible
    return F.cross_entropy(logits[masked], tokens[masked])


def sq_err(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Squared error summed over non-batch dims, averaged over the batch."""
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {tuple(pred.shape)} vs {tuple(target.shape)}")
    diff = (pred - target).reshape(pred.shape[0], -1)
    return (diff * diff).sum(dim=1).mean()


def ddpm_q_sample(x0: torch.Tensor, t, eps: torch.Tensor,
                  schedule: NoiseSchedule) -> torch.Tensor:
    """x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps, t in [1, T] (per sample ok)."""
    if x0.shape != eps.shape:
        raise ValueError("eps must match x0's shape")
    abar = _gather(schedule.alpha_bar, t, x0)
    return torch.sqrt(abar) * x0 + torch.sqrt(1.0 - abar) * eps


def ddpm_loss(noise_pred: torch.Tensor, eps: torch.Tensor) -> torch.Tensor:
    return sq_err(noise_pred, eps)


def fm_interpolate(x0: torch.Tensor, x1: torch.Tensor, t) -> torch.Tensor:
    """psi_t = (1 - t) x0 + t x1 along the straight path, t in [0, 1]."""
    if x0.shape != x1.shape:
        raise ValueError("x0 and x1 must share a shape")
    t = torch.as_tensor(t, dtype=x0.dtype)
    if torch.any(t < 0) or torch.any(t > 1):
        raise ValueError("t must lie in [0, 1]")
    if t.ndim == 1:
        t = t.reshape(-1, *([1] * (x0.ndim - 1)))
    return (1.0 - t) * x0 + t * x1


def fm_loss(v_pred: torch.Tensor, x0: torch.Tensor, x1: torch.Tensor) -> torch.Tensor:
    """Regression onto the path's time derivative, x1 - x0."""
    return sq_err(v_pred, x1 - x0)


def mar_loss(model, z: torch.Tensor, order: torch.Tensor, prefix_len,
             k, eps: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    """Per-token denoising: diffuse the token at order[prefix_len] to step k
    and regress its noise, conditioned on the clean tokens order[:prefix_len].

    `model.mar_predict(z_k, k, z, order, prefix_len)` must read only the
    prefix tokens of `z` (plus the noisy token and k); `prefix_len` may be 0.
    """
    B, L, _ = z.shape
    prefix_len = torch.as_tensor(prefix_len, dtype=torch.int64).reshape(-1)
    if prefix_len.numel() == 1:
        prefix_len = prefix_len.expand(B).clone()
    if torch.any(prefix_len < 0) or torch.any(prefix_len >= L):
        raise ValueError("prefix_len must lie in [0, L)")
    pos = order.gather(1, prefix_len.view(-1, 1)).squeeze(1)          # [B]
    z_i = z[torch.arange(B), pos]                                     # [B, p]
    z_k = ddpm_q_sample(z_i.unsqueeze(1), k, eps.unsqueeze(1), schedule).squeeze(1)
    eps_hat = model.mar_predict(z_k, k, z, order, prefix_len)
    return sq_err(eps_hat, eps)


# ============================================================
# Samplers
# ============================================================

def ddpm_sample(eps_model, schedule: NoiseSchedule, shape, seed: int,
                dtype=torch.float32) -> torch.Tensor:
    """Ancestral sampling with mean (x_t - beta_t/sqrt(1-abar_t) eps_hat)/sqrt(alpha_t)
    and variance beta tilde. `eps_model(x, t)` takes an int t."""
    rng = rng_from(_SAMPLE_TAG, seed)
    x = torch.from_numpy(rng.standard_normal(shape)).to(dtype)
    with torch.no_grad():
        for t in range(schedule.T, 0, -1):
            eps_hat = eps_model(x, t)
            a = schedule.alpha[t - 1]
            abar = schedule.alpha_bar[t - 1]
            mu = (x - schedule.beta[t - 1] / math.sqrt(1.0 - abar) * eps_hat) / math.sqrt(a)
            if t > 1:
                noise = torch.from_numpy(rng.standard_normal(shape)).to(dtype)
                x = mu + math.sqrt(schedule.posterior_var[t - 1]) * noise
            else:
                x = mu
    return x


def fm_sample(v_model, shape, n_steps: int, seed: int,
              dtype=torch.float32) -> torch.Tensor:
    """Explicit Euler from t=0 noise to t=1 data; `v_model(x, t)` takes float t."""
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    rng = rng_from(_SAMPLE_TAG, seed)
    x = torch.from_numpy(rng.standard_normal(shape)).to(dtype)
    h = 1.0 / n_steps
    with torch.no_grad():
        for i in range(n_steps):
            x = x + h * v_model(x, i * h)
    return x


def cosine_masked_count(L: int, it: int, n_iters: int) -> int:
    """How many positions remain masked after decode iteration `it`."""
    return int(math.floor(L * math.cos(math.pi / 2.0 * (it + 1) / n_iters)))


def maskgit_decode(logits_model, L: int, K: int, n_iters: int, seed: int) -> torch.Tensor:
    """Iterative parallel decoding: fill masked positions by argmax, keep the
    most confident per the cosine schedule, re-mask the rest. Greedy and
    deterministic; ties break toward the lower position index.

    `logits_model(ids, visible)` maps [1, L] ids + [1, L] bool to [1, L, K].
    """
    del seed  # greedy decoding has no stochastic choices; kept for interface parity
    ids = torch.zeros(1, L, dtype=torch.int64)
    visible = torch.zeros(1, L, dtype=torch.bool)
    with torch.no_grad():
        for it in range(n_iters):
            logits = logits_model(ids, visible)
            probs = F.softmax(logits[0].double(), dim=-1)
            conf, pred = probs.max(dim=-1)                      # [L]
            masked_idx = np.flatnonzero(~visible[0].numpy())
            ids[0, masked_idx] = pred[masked_idx]
            target_masked = cosine_masked_count(L, it, n_iters)
            n_commit = len(masked_idx) - target_masked
            if n_commit > 0:
                c = conf[masked_idx].numpy()
                commit = masked_idx[np.lexsort((masked_idx, -c))[:n_commit]]
                visible[0, commit] = True
        ids_final = ids
    return ids_final


def sample_maskgit_pattern(L: int, rng: np.random.Generator) -> np.ndarray:
    """Training visibility pattern: mask a cosine-distributed fraction, >= 1."""
    u = rng.random()
    n_mask = max(1, int(math.ceil(L * math.cos(math.pi / 2.0 * u))))
    visible = np.ones(L, dtype=bool)
    visible[rng.permutation(L)[:n_mask]] = False
    return visible
