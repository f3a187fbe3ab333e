"""Paradigm loss functions, the noise schedule, and the samplers, checked
against closed-form values and brute-force recomputation."""

import math

import numpy as np
import pytest
import torch

from tinyumm.common import rng_from
from tinyumm.heads import (causal_nll, cosine_masked_count, ddpm_loss,
                           ddpm_q_sample, ddpm_sample, fm_interpolate, fm_loss,
                           fm_sample, linear_schedule, make_schedule,
                           maskgit_decode, maskgit_loss, mar_loss,
                           sample_maskgit_pattern, sq_err)


# ============================================================
# Noise schedule
# ============================================================

def test_linear_schedule_invariants():
    s = linear_schedule()
    assert s.T == 100
    assert s.beta[0] == pytest.approx(1e-4) and s.beta[-1] == pytest.approx(0.02)
    assert s.alpha_bar[0] > 0.99
    assert np.all(np.diff(s.alpha_bar) < 0)
    assert np.all((s.beta > 0) & (s.beta < 1))
    # cumulative product identity, elementwise to 1e-12
    recomputed = np.cumprod(1.0 - s.beta)
    assert np.max(np.abs(recomputed - s.alpha_bar)) < 1e-12
    # posterior variance: (1 - abar_{t-1}) / (1 - abar_t) * beta_t
    abar_prev = np.concatenate([[1.0], s.alpha_bar[:-1]])
    want = (1.0 - abar_prev) / (1.0 - s.alpha_bar) * s.beta
    assert np.max(np.abs(want - s.posterior_var)) < 1e-12
    assert s.posterior_var[0] == 0.0


def test_schedule_rejects_bad_beta():
    with pytest.raises(ValueError):
        make_schedule(np.array([0.1, 1.5]))
    with pytest.raises(ValueError):
        make_schedule(np.array([0.1, 0.0]))


def test_schedule_dict_roundtrip():
    s = linear_schedule(T=7)
    r = type(s).from_dict(s.to_dict())
    assert r.T == 7
    assert np.array_equal(r.beta, s.beta)
    assert np.array_equal(r.alpha_bar, s.alpha_bar)


# ============================================================
# Discrete losses
# ============================================================

def test_causal_nll_uniform_logits_is_log_k():
    for K in (2, 16, 64):
        logits = torch.zeros(3, 5, K, dtype=torch.float64)
        tokens = torch.randint(0, K, (3, 5))
        assert float(causal_nll(logits, tokens)) == pytest.approx(math.log(K),
                                                                  abs=1e-12)


def test_causal_nll_rejects_out_of_range():
    logits = torch.zeros(2, 4, 8)
    bad = torch.full((2, 4), 8)
    with pytest.raises(ValueError):
        causal_nll(logits, bad)


def test_maskgit_all_masked_equals_full_ce():
    g = torch.Generator().manual_seed(0)
    logits = torch.randn(2, 6, 9, generator=g, dtype=torch.float64)
    tokens = torch.randint(0, 9, (2, 6), generator=g)
    visible = torch.zeros(2, 6, dtype=torch.bool)
    full = torch.nn.functional.cross_entropy(logits.reshape(-1, 9),
                                             tokens.reshape(-1))
    assert float(maskgit_loss(logits, tokens, visible)) == pytest.approx(
        float(full), rel=1e-12)


def test_maskgit_ignores_visible_positions():
    g = torch.Generator().manual_seed(1)
    logits = torch.randn(2, 6, 9, generator=g, dtype=torch.float64)
    tokens = torch.randint(0, 9, (2, 6), generator=g)
    visible = torch.zeros(2, 6, dtype=torch.bool)
    visible[:, :3] = True
    base = float(maskgit_loss(logits, tokens, visible))
    scrambled = logits.clone()
    scrambled[:, :3] = 1000.0
    assert float(maskgit_loss(scrambled, tokens, visible)) == base


def test_maskgit_rejects_fully_visible_sample():
    logits = torch.zeros(2, 4, 5)
    tokens = torch.zeros(2, 4, dtype=torch.int64)
    visible = torch.zeros(2, 4, dtype=torch.bool)
    visible[1] = True
    with pytest.raises(ValueError):
        maskgit_loss(logits, tokens, visible)


# ============================================================
# Continuous losses
# ============================================================

def test_sq_err_sums_dims_means_batch():
    pred = torch.tensor([[1.0, 2.0], [0.0, 0.0]], dtype=torch.float64)
    target = torch.zeros(2, 2, dtype=torch.float64)
    assert float(sq_err(pred, target)) == pytest.approx((1 + 4) / 2, abs=0)


def test_ddpm_loss_expected_dim_for_zero_predictor():
    # with eps_hat = 0 the loss is |eps|^2, whose mean equals the flattened
    # dimension; chi-square tail bounds the sample mean
    rng = rng_from(10)
    dim, n = 24, 4000
    eps = torch.from_numpy(rng.standard_normal((n, dim)))
    loss = float(ddpm_loss(torch.zeros(n, dim, dtype=torch.float64), eps))
    sigma = math.sqrt(2.0 * dim / n)
    assert abs(loss - dim) < 5 * sigma


def test_q_sample_formula_and_limits():
    s = linear_schedule(T=50)
    rng = rng_from(11)
    x0 = torch.from_numpy(rng.standard_normal((4, 3)))
    eps = torch.from_numpy(rng.standard_normal((4, 3)))
    for t in (1, 25, 50):
        want = (math.sqrt(s.alpha_bar[t - 1]) * x0
                + math.sqrt(1 - s.alpha_bar[t - 1]) * eps)
        got = ddpm_q_sample(x0, t, eps, s)
        assert torch.allclose(got, want, atol=1e-12)
    # t=1 nearly clean; at the default length the endpoint is mostly noise
    assert s.alpha_bar[0] > 0.99
    assert linear_schedule().alpha_bar[-1] < 0.5


def test_q_sample_rejects_t_out_of_range():
    s = linear_schedule(T=10)
    x = torch.zeros(2, 3)
    with pytest.raises(ValueError):
        ddpm_q_sample(x, 0, x, s)
    with pytest.raises(ValueError):
        ddpm_q_sample(x, 11, x, s)


def test_fm_interpolate_endpoints_exact():
    rng = rng_from(12)
    x0 = torch.from_numpy(rng.standard_normal((5, 7)))
    x1 = torch.from_numpy(rng.standard_normal((5, 7)))
    assert torch.equal(fm_interpolate(x0, x1, 0.0), x0)
    assert torch.equal(fm_interpolate(x0, x1, 1.0), x1)
    mid = fm_interpolate(x0, x1, 0.5)
    assert torch.allclose(mid, 0.5 * x0 + 0.5 * x1, atol=0)


def test_fm_loss_target_is_difference():
    rng = rng_from(13)
    x0 = torch.from_numpy(rng.standard_normal((3, 4)))
    x1 = torch.from_numpy(rng.standard_normal((3, 4)))
    v = torch.from_numpy(rng.standard_normal((3, 4)))
    assert float(fm_loss(v, x0, x1)) == float(sq_err(v, x1 - x0))
    assert float(fm_loss(x1 - x0, x0, x1)) == 0.0


def test_fm_interpolate_rejects_t_outside_unit():
    x = torch.zeros(2, 3)
    with pytest.raises(ValueError):
        fm_interpolate(x, x, -0.1)
    with pytest.raises(ValueError):
        fm_interpolate(x, x, 1.5)


def test_mar_loss_matches_manual_recomputation():
    s = linear_schedule(T=20)
    rng = rng_from(14)
    B, L, p = 3, 6, 4
    z = torch.from_numpy(rng.standard_normal((B, L, p)))
    order = torch.stack([torch.randperm(L) for _ in range(B)])
    prefix_len = torch.tensor([0, 2, 5])
    k = torch.tensor([1, 7, 20])
    eps = torch.from_numpy(rng.standard_normal((B, p)))

    captured = {}

    class Probe:
        def mar_predict(self, z_k, kk, zz, oo, pl):
            captured.update(z_k=z_k.clone(), k=kk, order=oo, prefix=pl)
            return torch.zeros_like(z_k)

    loss = mar_loss(Probe(), z, order, prefix_len, k, eps, s)
    # the noised token is z[order[prefix_len]] diffused to step k
    for b in range(B):
        pos = int(order[b, prefix_len[b]])
        abar = s.alpha_bar[int(k[b]) - 1]
        want = math.sqrt(abar) * z[b, pos] + math.sqrt(1 - abar) * eps[b]
        assert torch.allclose(captured["z_k"][b], want, atol=1e-12)
    assert float(loss) == pytest.approx(float(sq_err(torch.zeros_like(eps), eps)),
                                        rel=1e-12)


def test_mar_loss_rejects_full_prefix():
    s = linear_schedule(T=5)
    z = torch.zeros(1, 4, 2)
    order = torch.arange(4).unsqueeze(0)

    class Dummy:
        def mar_predict(self, *a):
            return torch.zeros(1, 2)

    with pytest.raises(ValueError):
        mar_loss(Dummy(), z, order, torch.tensor([4]), 1, torch.zeros(1, 2), s)


# ============================================================
# Samplers
# ============================================================

def test_euler_constant_field_step_count_invariant():
    c = torch.tensor([[1.5, -2.0, 0.25]], dtype=torch.float64)

    def v(x, t):
        return c.expand_as(x)

    results = [fm_sample(v, (2, 3), n, seed=5, dtype=torch.float64)
               for n in (1, 2, 5, 20, 100)]
    for r in results[1:]:
        assert torch.max(torch.abs(r - results[0])) < 1e-12


def test_fm_sample_deterministic_by_seed():
    def v(x, t):
        return -x

    a = fm_sample(v, (2, 3), 10, seed=1)
    b = fm_sample(v, (2, 3), 10, seed=1)
    c2 = fm_sample(v, (2, 3), 10, seed=2)
    assert torch.equal(a, b)
    assert not torch.equal(a, c2)


def test_ddpm_sample_deterministic_by_seed():
    s = linear_schedule(T=10)

    def eps_model(x, t):
        return torch.zeros_like(x)

    a = ddpm_sample(eps_model, s, (2, 4), seed=3)
    b = ddpm_sample(eps_model, s, (2, 4), seed=3)
    c2 = ddpm_sample(eps_model, s, (2, 4), seed=4)
    assert torch.equal(a, b)
    assert not torch.equal(a, c2)


def test_cosine_masked_count_schedule():
    L, n = 64, 8
    counts = [cosine_masked_count(L, it, n) for it in range(n)]
    assert counts[-1] == 0, "final iteration leaves nothing masked"
    assert all(c1 >= c2 for c1, c2 in zip(counts, counts[1:]))
    assert all(0 <= c < L for c in counts)


def test_maskgit_decode_fills_everything_deterministically():
    L, K = 12, 5
    target = torch.arange(L) % K

    def logits_model(ids, visible):
        # strongly prefer the target id at every position
        out = torch.zeros(1, L, K)
        out[0, torch.arange(L), target] = 50.0
        return out

    ids1 = maskgit_decode(logits_model, L, K, n_iters=4, seed=0)
    ids2 = maskgit_decode(logits_model, L, K, n_iters=4, seed=0)
    assert torch.equal(ids1, ids2)
    assert torch.equal(ids1[0], target)


def test_sample_maskgit_pattern_always_masks_something():
    rng = rng_from(15)
    for _ in range(200):
        visible = sample_maskgit_pattern(10, rng)
        assert visible.dtype == bool and visible.shape == (10,)
        assert not visible.all()
