"""Acceptance gate: one test per shipped criterion, each printing a single
PASS line with the measured values (written to the real stdout so the line
survives pytest's capture)."""

import functools
import json
import math
import sys
import time

import conftest
import numpy as np
import pytest
import torch
from torch import nn

from tinyumm import evalsuite
from tinyumm.cli import main
from tinyumm.common import rng_from
from tinyumm.data import SceneDataset, build_dataset
from tinyumm.evalsuite import depth_similarity
from tinyumm.scenes import SceneSpec
from tinyumm.heads import causal_nll, ddpm_loss, ddpm_q_sample, fm_interpolate, \
    fm_loss, fm_sample, linear_schedule, maskgit_loss, mar_loss, sq_err
from tinyumm.model import PARADIGMS, load_checkpoint
from tinyumm.targets import boundary_map, normalize_depth
from tinyumm.trainer import LossWeights, TrainConfig, Trainer


def announce(line: str) -> None:
    conftest.ACCEPTANCE_LINES.append(line)
    sys.__stdout__.write(line + "\n")
    sys.__stdout__.flush()


def criterion(name):
    """Decorator: print `name PASS: <returned detail>` or `name FAIL`."""
    def wrap(fn):
        @functools.wraps(fn)
        def run(*args, **kwargs):
            try:
                detail = fn(*args, **kwargs)
            except BaseException:
                announce(f"{name} FAIL")
                raise
            announce(f"{name} PASS: {detail}")
        return run
    return wrap


# ============================================================
# C1: the optimized total equals the sum of per-task losses
# ============================================================

@criterion("C1")
def test_c1_loss_sum_identity(tiny_cfg, dataset):
    t0 = time.monotonic()
    weights = LossWeights(1.0, 1.0, 1.0, 1.0)
    steps_per_paradigm = 200
    worst = 0.0
    for pi, paradigm in enumerate(PARADIGMS):
        cfg = tiny_cfg(paradigm=paradigm, layers=1, batch_per_task=2, T=10,
                       mar_head_layers=1, seed=100 + pi,
                       text_warmup_steps=10**9)
        tr = Trainer(cfg, dataset)
        for _ in range(steps_per_paradigm):
            oracle_batches = tr.build_batches(tr.step, weights.active())
            with torch.no_grad():
                indep = sum(
                    sum(float(tr.task_loss(mb)) for mb in micros) / len(micros)
                    for micros in oracle_batches.values())
            rep = tr.train_step(tr.build_batches(tr.step, weights.active()),
                                weights)
            rel = abs(rep.l_total - indep) / abs(rep.l_total)
            worst = max(worst, rel)
            assert rel < 1e-6, (paradigm, tr.step, rel)
    elapsed = time.monotonic() - t0
    assert elapsed < 120, f"C1 exceeded 2 min: {elapsed:.0f}s"
    return (f"{steps_per_paradigm * len(PARADIGMS)} steps, worst rel "
            f"{worst:.3e} < 1e-6 ({elapsed:.0f}s)")


# ============================================================
# C2: loss-op gradients match central finite differences
# ============================================================

def _directional_check(build_loss, module, n_dirs=20, eps=1e-5):
    """Worst relative error between autograd and central differences over
    n_dirs random unit directions in the flattened parameter vector."""
    params = [p for p in module.parameters()]
    assert sum(p.numel() for p in params) <= 5000
    rng = rng_from(2024, sum(p.numel() for p in params))
    worst = 0.0
    for _ in range(n_dirs):
        direction = [torch.from_numpy(rng.standard_normal(tuple(p.shape)))
                     for p in params]
        norm = math.sqrt(sum(float((d * d).sum()) for d in direction))
        direction = [d / norm for d in direction]

        loss = build_loss()
        grads = torch.autograd.grad(loss, params)
        analytic = sum(float((g * d).sum()) for g, d in zip(grads, direction))

        def nudge(sign):
            with torch.no_grad():
                for p, d in zip(params, direction):
                    p += sign * eps * d

        with torch.no_grad():
            nudge(+1.0)
            up = float(build_loss())
            nudge(-2.0)
            down = float(build_loss())
            nudge(+1.0)
        numeric = (up - down) / (2.0 * eps)
        rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-12)
        worst = max(worst, rel)
    return worst


class _MLP(nn.Module):
    def __init__(self, d_in, d_out, hidden=32, seed=0):
        super().__init__()
        torch.manual_seed(seed)
        self.net = nn.Sequential(nn.Linear(d_in, hidden), nn.Tanh(),
                                 nn.Linear(hidden, d_out)).double()

    def forward(self, x):
        return self.net(x)


class _MarNet(nn.Module):
    """Minimal mar_predict backbone: reads the noisy token, the step index,
    and exactly the prefix tokens."""

    def __init__(self, token_dim, prefix, seed=0):
        super().__init__()
        torch.manual_seed(seed)
        self.prefix = prefix
        self.net = nn.Sequential(
            nn.Linear(token_dim * (1 + prefix) + 1, 24), nn.Tanh(),
            nn.Linear(24, token_dim)).double()

    def mar_predict(self, z_k, k, z, order, prefix_len):
        B = z.shape[0]
        ctx = z[torch.arange(B)[:, None], order[:, :self.prefix]].reshape(B, -1)
        kf = torch.as_tensor(k, dtype=z.dtype).reshape(-1, 1).expand(B, 1)
        return self.net(torch.cat([z_k, ctx, kf / 10.0], dim=1))


@criterion("C2")
def test_c2_gradients_match_finite_differences():
    t0 = time.monotonic()
    rng = rng_from(77)
    B, L, K, D = 2, 5, 7, 6
    x = torch.from_numpy(rng.standard_normal((B, L, K)))
    ids = torch.from_numpy(rng.integers(0, K, size=(B, L)))
    visible = torch.zeros((B, L), dtype=torch.bool)
    visible[:, :2] = True
    eps_t = torch.from_numpy(rng.standard_normal((B, D)))
    x0 = torch.from_numpy(rng.standard_normal((B, D)))
    x1 = torch.from_numpy(rng.standard_normal((B, D)))
    z = torch.from_numpy(rng.standard_normal((B, L, D)))
    order = torch.stack([torch.randperm(L) for _ in range(B)])
    schedule = linear_schedule(T=10)

    net_tok = _MLP(K, K, seed=1)
    net_ddpm = _MLP(D, D, seed=2)
    net_fm = _MLP(D, D, seed=3)
    net_mar = _MarNet(D, prefix=2, seed=4)
    k_step = torch.full((B,), 4, dtype=torch.int64)
    eps_mar = torch.from_numpy(rng.standard_normal((B, D)))

    ops = {
        "causal_nll": (net_tok, lambda: causal_nll(net_tok(x), ids)),
        "maskgit_loss": (net_tok, lambda: maskgit_loss(net_tok(x), ids, visible)),
        "ddpm_loss": (net_ddpm, lambda: ddpm_loss(net_ddpm(
            ddpm_q_sample(x0, 4, eps_t, schedule)), eps_t)),
        "fm_loss": (net_fm, lambda: fm_loss(net_fm(
            fm_interpolate(x0, x1, 0.3)), x0, x1)),
        "mar_loss": (net_mar, lambda: mar_loss(
            net_mar, z, order, 2, k_step, eps_mar, schedule)),
    }
    report = []
    for name, (module, build) in ops.items():
        worst = _directional_check(build, module)
        assert worst < 1e-4, (name, worst)
        report.append(f"{name} {worst:.2e}")
    elapsed = time.monotonic() - t0
    assert elapsed < 300, f"C2 exceeded 5 min: {elapsed:.0f}s"
    return ("20 directions/op, worst rel: " + ", ".join(report)
            + f" ({elapsed:.1f}s)")


# ============================================================
# C3: stepwise forward chain matches the closed-form marginal
# ============================================================

@criterion("C3")
def test_c3_ddpm_chain_matches_marginal():
    t0 = time.monotonic()
    schedule = linear_schedule(T=100)
    beta = torch.from_numpy(schedule.beta)
    n, dim = 10_000, 8
    rng = rng_from(31)
    x0_row = torch.from_numpy(rng.standard_normal(dim) * 2.0)
    details = []
    for t in (1, 50, 100):
        x = x0_row.expand(n, dim).clone()
        for k in range(1, t + 1):
            eps_k = torch.from_numpy(rng.standard_normal((n, dim)))
            x = torch.sqrt(1.0 - beta[k - 1]) * x + torch.sqrt(beta[k - 1]) * eps_k
        eps = torch.from_numpy(rng.standard_normal((n, dim)))
        marginal = ddpm_q_sample(x0_row.expand(n, dim), t, eps, schedule)

        abar = schedule.alpha_bar[t - 1]
        mean_theory = math.sqrt(abar) * x0_row
        var_theory = 1.0 - abar
        mean_se = math.sqrt(var_theory / n)
        var_se = var_theory * math.sqrt(2.0 / (n - 1))
        for sample in (x, marginal):
            mean_err = (sample.mean(dim=0) - mean_theory).abs().max()
            var_err = (sample.var(dim=0) - var_theory).abs().max()
            assert float(mean_err) < 3.0 * mean_se, (t, float(mean_err))
            assert float(var_err) < 3.0 * var_se, (t, float(var_err))
        cross_mean = float((x.mean(0) - marginal.mean(0)).abs().max())
        assert cross_mean < 3.0 * math.sqrt(2.0) * mean_se, (t, cross_mean)
        cross_var = float((x.var(0) - marginal.var(0)).abs().max())
        assert cross_var < 3.0 * math.sqrt(2.0) * var_se, (t, cross_var)
        details.append(f"t={t} mean|d|={cross_mean:.4f}")
    elapsed = time.monotonic() - t0
    assert elapsed < 120, f"C3 exceeded 2 min: {elapsed:.0f}s"
    return f"10^4 samples, chain vs marginal within 3 sigma: " \
           f"{'; '.join(details)} ({elapsed:.0f}s)"


# ============================================================
# C4: flow-matching path identities and Euler invariance
# ============================================================

@criterion("C4")
def test_c4_flow_matching_identities():
    rng = rng_from(41)
    x0 = torch.from_numpy(rng.standard_normal((4, 7)))
    x1 = torch.from_numpy(rng.standard_normal((4, 7)))
    assert torch.equal(fm_interpolate(x0, x1, 0.0), x0)
    assert torch.equal(fm_interpolate(x0, x1, 1.0), x1)
    v_exact = x1 - x0
    assert float(fm_loss(v_exact, x0, x1)) == 0.0
    assert torch.equal(fm_loss(v_exact + 1.0, x0, x1),
                       sq_err(v_exact + 1.0, v_exact))

    field = torch.from_numpy(rng.standard_normal(7))
    results = [fm_sample(lambda z, t: field.expand_as(z), (3, 7),
                         n_steps=n, seed=5, dtype=torch.float64)
               for n in (1, 2, 3, 5, 8, 20, 100)]
    worst = max(float((r - results[0]).abs().max()) for r in results[1:])
    assert worst < 1e-12, worst
    return (f"endpoint/target identities exact; Euler step-count spread "
            f"{worst:.2e} < 1e-12")


# ============================================================
# C5: target prep is bit-exact against brute-force oracles
# ============================================================

def _oracle_boundary(masks, h, w):
    out = np.zeros((h, w), dtype=bool)
    for m in masks:
        for y in range(h):
            for x in range(w):
                if not m[y, x]:
                    continue
                for dy, dx in ((-1, 0), (1, 0), (0, -1), (0, 1)):
                    ny, nx = y + dy, x + dx
                    if not (0 <= ny < h and 0 <= nx < w) or not m[ny, nx]:
                        out[y, x] = True
                        break
    plane = np.where(out, 255, 0).astype(np.uint8)
    return np.repeat(plane[:, :, None], 3, axis=2)


@criterion("C5")
def test_c5_target_prep_bit_exact():
    rng = rng_from(51)
    for trial in range(50):
        h, w = int(rng.integers(4, 20)), int(rng.integers(4, 20))
        depth = rng.standard_normal((h, w)) * rng.uniform(0.5, 40.0)
        depth.flat[int(rng.integers(depth.size))] = depth.max() + 1.0
        target = normalize_depth(depth)
        assert target.map.min() == 0 and target.map.max() == 255
        assert np.array_equal(target.map[:, :, 0], target.map[:, :, 1])
        assert np.array_equal(target.map[:, :, 0], target.map[:, :, 2])
        a, b = float(rng.uniform(0.1, 5.0)), float(rng.uniform(-10.0, 10.0))
        affine = normalize_depth(a * depth + b)
        assert np.array_equal(affine.map, target.map), trial

    for trial in range(100):
        h, w = int(rng.integers(4, 24)), int(rng.integers(4, 24))
        masks = []
        for _ in range(int(rng.integers(0, 4))):
            m = rng.random((h, w)) < rng.uniform(0.2, 0.7)
            masks.append(m)
        got = boundary_map(masks, shape=(h, w))
        assert np.array_equal(got.map, _oracle_boundary(masks, h, w)), trial
    return ("50 depth maps: min->0, max->255, channels equal, affine "
            "invariant; 100 mask sets match the 4-neighbor oracle bit-exactly")


# ============================================================
# Training-dynamics criteria: shared world and configuration.
# Two-object scenes keep generation and spatial VQA learnable to
# near-ceiling within CPU budgets; training runs are deterministic
# so these measurements repeat bit-for-bit.
# ============================================================

def _world(tmp_root, name, n_objects, n_train, root_seed):
    out = tmp_root / name
    build_dataset(SceneSpec(image_size=32, n_objects=n_objects),
                  n_train=n_train, n_eval=64, root_seed=root_seed,
                  out_dir=out)
    return SceneDataset(out)


def _dyn_cfg(dataset, seed, steps, **overrides):
    base = dict(paradigm="maskgit", d=64, layers=3, heads=4, K=64, patch=4,
                enc_layers=2, prompt_len=16, batch_per_task=8, accum=1,
                lr=3e-4, clip_norm=1.0, weight_decay=0.0,
                text_warmup_steps=10**9, seed=seed,
                data_dir=str(dataset.root), steps=steps)
    base.update(overrides)
    return TrainConfig(**base)


def _spatial_acc(model, dataset):
    result = evalsuite.vqa_eval(evalsuite.model_answerer(model),
                                dataset.split("eval"),
                                valid_answers=model.answers)
    return result.accuracies["spatial"]


@pytest.fixture(scope="session")
def world512x2(tmp_path_factory):
    return _world(tmp_path_factory.mktemp("accept"), "w512x2",
                  n_objects=2, n_train=512, root_seed=55)


# ============================================================
# C6: und-only finetuning forgets pixels; joint training does not
# ============================================================
#
# The warmup must land on a *flat* held-out pixel-loss floor: the
# within-5% band is two-sided, so a checkpoint still improving (or
# still overfitting) fails the joint arm no matter how it forgets.
# A d32 trunk on 512 scenes reaches a capacity floor (train and eval
# plateau together) quickly and cheaply; at that floor, und-only
# training must reallocate scarce trunk capacity to text, eroding
# pixel reconstruction, while the joint branch sits at equilibrium.

C6_WARMUP = 2000                      # TBD: freeze from calibration
C6_SEEDS = (0, 1, 2)


def _c6_cfg(dataset, seed):
    return _dyn_cfg(dataset, seed=seed, steps=C6_WARMUP + 1000,
                    d=32, layers=2, lr=1e-3)


@criterion("C6")
def test_c6_und_only_forgets_joint_retains(world512x2):
    t0 = time.monotonic()
    details = []
    for seed in C6_SEEDS:
        trainer = Trainer(_c6_cfg(world512x2, seed), world512x2)
        trainer.run(weights=LossWeights(1, 1, 1, 1), n_steps=C6_WARMUP)
        px0 = trainer.eval_task_loss("pixel")
        ckpt = world512x2.root.parent / f"c6_w{seed}"
        trainer.save(ckpt)

        trainer.run(weights=LossWeights(1, 1, 1, 1), n_steps=1000)
        px_joint = trainer.eval_task_loss("pixel")

        model, opt_state, step, _ = load_checkpoint(ckpt)
        und = Trainer(_c6_cfg(world512x2, seed), world512x2, model=model,
                      optimizer_state=opt_state, start_step=step)
        und.run(weights=LossWeights(0, 0, 0, 1), n_steps=1000)
        px_und = und.eval_task_loss("pixel")

        rel_joint = px_joint / px0 - 1.0
        rel_und = px_und / px0 - 1.0
        details.append(f"seed {seed}: und {rel_und:+.0%}, joint "
                       f"{rel_joint:+.1%}")
        assert rel_und >= 0.20, (seed, px0, px_und)
        assert abs(rel_joint) <= 0.05, (seed, px0, px_joint)
    elapsed = time.monotonic() - t0
    assert elapsed < 1200, f"C6 exceeded 20 min: {elapsed:.0f}s"
    return (f"{C6_WARMUP}-step warmup; " + "; ".join(details)
            + f" (bars: und >= +20%, joint within 5%; {elapsed:.0f}s)")


# ============================================================
# C7: what each added representation buys, at equal budgets
# ============================================================

C7_STEPS = 4500
C7_ROWS = (("+pixel", LossWeights(1, 0, 0, 1)),
           ("+depth", LossWeights(1, 1, 0, 1)),
           ("+seg", LossWeights(1, 1, 1, 1)))


@criterion("C7")
def test_c7_added_representations_pay_off(world512x2):
    scores = {}
    for name, weights in C7_ROWS:
        t0 = time.monotonic()
        trainer = Trainer(_dyn_cfg(world512x2, seed=0, steps=C7_STEPS),
                          world512x2)
        trainer.run(weights=weights, n_steps=C7_STEPS)
        report = evalsuite.evaluate(trainer.model, world512x2, "eval",
                                    seed=5, n_scenes=32)
        elapsed = time.monotonic() - t0
        assert elapsed < 1800, f"{name} row exceeded 30 min: {elapsed:.0f}s"
        scores[name] = (report, elapsed)
    depth_gain = scores["+depth"][0].depth_sim - scores["+pixel"][0].depth_sim
    assert scores["+depth"][0].depth_sim >= 0.85, scores["+depth"][0].depth_sim
    assert depth_gain >= 0.05, depth_gain
    assert scores["+seg"][0].seg_sim >= 0.6, scores["+seg"][0].seg_sim
    assert scores["+seg"][0].seg_sim > scores["+pixel"][0].seg_sim
    return (f"{C7_STEPS}-step rows: depth_sim +pixel "
            f"{scores['+pixel'][0].depth_sim:.3f} vs +depth "
            f"{scores['+depth'][0].depth_sim:.3f} (gain {depth_gain:+.3f} "
            f">= 0.05); boundary F1 +pixel {scores['+pixel'][0].seg_sim:.3f} "
            f"vs +seg {scores['+seg'][0].seg_sim:.3f} (>= 0.6); row times "
            + "/".join(f"{scores[n][1]:.0f}s" for n, _ in C7_ROWS))


# ============================================================
# C8: joint training does not cost understanding accuracy
# ============================================================
#
# Spatial VQA needs scenes rich in spatial relations: three-object
# scenes carry three object pairs each, and the larger world keeps
# held-out questions from being answerable by memorization.

C8_STEPS = 10_000                     # TBD: freeze from calibration
C8_SEEDS = (0, 1, 2)


@pytest.fixture(scope="session")
def world1024x3(tmp_path_factory):
    return _world(tmp_path_factory.mktemp("accept8"), "w1024x3",
                  n_objects=3, n_train=1024, root_seed=58)


@criterion("C8")
def test_c8_joint_matches_und_only_understanding(world1024x3):
    t0 = time.monotonic()
    accs = {"full": [], "und": []}
    for seed in C8_SEEDS:
        for arm, weights in (("full", LossWeights(1, 1, 1, 1)),
                             ("und", LossWeights(0, 0, 0, 1))):
            trainer = Trainer(_dyn_cfg(world1024x3, seed=seed, steps=C8_STEPS),
                              world1024x3)
            trainer.run(weights=weights, n_steps=C8_STEPS)
            accs[arm].append(_spatial_acc(trainer.model, world1024x3))
    full_mean = sum(accs["full"]) / len(C8_SEEDS)
    und_mean = sum(accs["und"]) / len(C8_SEEDS)
    assert full_mean >= und_mean, (accs, full_mean, und_mean)
    assert full_mean >= 0.90, accs
    elapsed = time.monotonic() - t0
    return (f"{C8_STEPS} steps x 3 seeds: spatial acc full "
            f"{full_mean:.3f} (seeds {', '.join(f'{a:.2f}' for a in accs['full'])}) "
            f">= und-only {und_mean:.3f} and >= 0.90 ({elapsed:.0f}s)")


# ============================================================
# C9: depth-similarity reference values
# ============================================================

@criterion("C9")
def test_c9_depth_similarity_reference_cases():
    rng = rng_from(91)
    base = rng.integers(0, 200, size=(12, 12, 3)).astype(np.uint8)
    same = depth_similarity(base, base.copy())
    assert same == 1.0
    far = depth_similarity(np.zeros((8, 8), np.uint8),
                           np.full((8, 8), 255, np.uint8))
    assert far == 0.0
    flat = rng.integers(0, 200, size=(9, 11)).astype(np.uint8)
    offset = depth_similarity(flat, (flat + 51).astype(np.uint8))
    assert offset == 0.8
    return f"identity {same}, extremes {far}, offset-51 {offset} (all exact)"


# ============================================================
# C10: the ablation pipeline is run-to-run deterministic
# ============================================================

@criterion("C10")
def test_c10_ablate_is_deterministic(dataset_dir, tmp_path):
    t0 = time.monotonic()
    outs = []
    for tag in ("run_a", "run_b"):
        out = tmp_path / tag
        flags = []
        for key, value in dict(
                d=32, layers=1, heads=2, K=16, patch=4, enc_layers=1,
                prompt_len=16, T=10, mar_head_layers=1, mar_sample_steps=4,
                fm_sample_steps=4, maskgit_iters=4, batch_per_task=2, accum=1,
                lr=3e-4, text_warmup_steps=10**9, seed=17, warmup_steps=30,
                row_steps=20, eval_every=10, data_dir=dataset_dir,
                out_dir=out).items():
            flags += ["--set", f"{key}={value}"]
        assert main(["ablate"] + flags) == 0
        outs.append(out)
    a, b = outs
    table_a = (a / "ablation_table.json").read_bytes()
    assert table_a == (b / "ablation_table.json").read_bytes()
    logs = ["warmup/metrics.jsonl"] + [
        f"row_{name}/metrics.jsonl"
        for name in ("und-only", "plus_pixel", "plus_depth", "plus_seg")]
    for rel in logs:
        assert (a / rel).read_bytes() == (b / rel).read_bytes(), rel
    rows = json.loads(table_a)["rows"]
    elapsed = time.monotonic() - t0
    return (f"two ablate runs: table JSON and {len(logs)} metrics logs "
            f"byte-identical over {len(rows)} rows ({elapsed:.0f}s)")
