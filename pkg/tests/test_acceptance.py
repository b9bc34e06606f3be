"""End-to-end acceptance checks, one per criterion.

Each check prints a single ``[PASS]``/``[FAIL]`` line with the measured value and
the threshold. Run under pytest (``pytest tests/test_acceptance.py -s``) or
directly (``python tests/test_acceptance.py``). The training check takes about
ten minutes on one CPU core.
"""

import sys

import numpy as np
import pytest
import torch

from scoreda.covariance import KroneckerCovariance
from scoreda.denoiser.analytic import GaussianAnalyticDenoiser
from scoreda.denoiser.base import vjp_finite_difference_check
from scoreda.denoiser.conv import ConvDenoiser
from scoreda.denoiser.training import TrainConfig, split_train_val, train
from scoreda.guidance import GuidanceConfig, assimilate_ensemble, preset
from scoreda.metrics import crps_fair, ensemble_spread, rank_histogram
from scoreda.obs import ObservationSet, make_channel_mask, regular_stride, simulate_pseudo_obs
from scoreda.oracle import _timed as timed
from scoreda.oracle import (
    CheckResult,
    check_adapter,
    check_determinism,
    check_linear_gaussian_posterior,
    check_presets,
)

torch.set_num_threads(1)


def criterion_1():
    res = check_linear_gaussian_posterior(members=256)
    res.name = "1 linear-Gaussian posterior"
    if res.seconds >= 300:
        res.passed = False
    return res


def criterion_2():
    res = check_adapter(n_taus=20)
    res.name = "2 adapter exactness"
    return res


@timed
def criterion_3():
    rng = np.random.default_rng(0)
    analytic = GaussianAnalyticDenoiser.squared_exponential(8, 8, 2.0, np.array([[1.0, 0.6], [0.6, 1.0]]))
    torch.manual_seed(0)
    conv = ConvDenoiser((2, 8, 8), base=8, emb_dim=16)
    with torch.no_grad():
        conv.net.out.weight.normal_(0, 0.1)
        conv.net.out.bias.normal_(0, 0.1)
    conv.invalidate()
    worst = {"analytic": 0.0, "conv": 0.0}
    for name, d in (("analytic", analytic), ("conv", conv)):
        for sigma in (0.1, 1.0, 10.0):
            x = rng.standard_normal(d.shape) * np.sqrt(1 + sigma**2)
            ct = rng.standard_normal(d.shape)
            err = vjp_finite_difference_check(d, x, sigma, ct, n_directions=20, rng=rng)
            worst[name] = max(worst[name], err)
    ok = worst["analytic"] < 1e-6 and worst["conv"] < 1e-3
    return CheckResult(
        "3 score/vjp finite differences",
        ok,
        f"analytic {worst['analytic']:.2e}, conv {worst['conv']:.2e}",
        "analytic < 1e-6, conv < 1e-3",
    )


@timed
def criterion_4():
    prior = GaussianAnalyticDenoiser.squared_exponential(32, 32, 3.0)
    data = prior.sample_prior(np.random.default_rng(0), 10000).astype(np.float32)
    torch.manual_seed(0)
    model = ConvDenoiser((1, 32, 32), base=16)
    result = train(model, data, TrainConfig(iterations=2000, batch_size=64, learning_rate=2e-3, seed=0))
    optimum = prior.mmse(1.0)
    _, val = split_train_val(data, 0.1, 0)
    rng = np.random.default_rng(5)
    gaps = {}
    for sigma in (0.1, 0.5, 1.0, 2.0):
        noisy = val[:200] + sigma * rng.standard_normal(val[:200].shape)
        gaps[sigma] = float(np.mean(np.abs(model.evaluate(noisy, sigma) - prior.evaluate(noisy, sigma))))
    ratio = result.val_mse / optimum
    ok = ratio <= 1.10 and max(gaps.values()) < 0.15 and result.seconds < 3600
    gap_text = ", ".join(f"{s}: {g:.3f}" for s, g in gaps.items())
    return CheckResult(
        "4 training sanity",
        ok,
        f"val MSE {result.val_mse:.5f} vs optimum {optimum:.5f} (ratio {ratio:.3f}); |Dc-Da| {gap_text}; "
        f"train {result.seconds:.0f}s",
        "ratio <= 1.10, |Dc-Da| < 0.15 at each sigma, < 60 min",
    )


STRIDES = (32, 16, 8, 4)


@timed
def criterion_5(n_seeds=20, members=16):
    prior = GaussianAnalyticDenoiser.squared_exponential(64, 64, 3.0)
    held = np.ones((64, 64), bool)
    held[::4, ::4] = False  # never observed at any of the strides
    rmse = np.zeros((n_seeds, len(STRIDES)))
    for seed in range(n_seeds):
        truth = prior.sample_prior(np.random.default_rng([5, seed]))
        for j, s in enumerate(STRIDES):
            obs = simulate_pseudo_obs(truth, regular_stride(prior.shape, s), 0.1, np.random.default_rng([6, seed, s]))
            ens = assimilate_ensemble(prior, obs, GuidanceConfig(seed=seed), members, batch_size=members)
            rmse[seed, j] = np.sqrt(np.mean((ens.mean()[0] - truth[0])[held] ** 2))
    curve = rmse.mean(axis=0)
    rises = [(b - a) / a for a, b in zip(curve, curve[1:]) if b > a]
    ok = len(rises) == 0 or (len(rises) == 1 and rises[0] <= 0.02)
    return CheckResult(
        "5 density monotonicity",
        ok,
        "held-out RMSE " + ", ".join(f"s{s}: {v:.4f}" for s, v in zip(STRIDES, curve)),
        "non-increasing, at most one rise <= 2%",
    )


@timed
def criterion_6(n_seeds=20, members=4, size=16):
    corr = np.array([[1.0, 0.9], [0.9, 1.0]])
    prior = GaussianAnalyticDenoiser(KroneckerCovariance(size, size, 3.0, corr, 1e-6))
    guided, free = [], []
    for seed in range(n_seeds):
        truth = prior.sample_prior(np.random.default_rng([7, seed]))
        obs = simulate_pseudo_obs(truth, make_channel_mask(prior.shape, [0]), 0.1, np.random.default_rng([8, seed]))
        cfg = preset("missing-channel", seed=seed)
        for target, o in ((guided, obs), (free, ObservationSet.empty(prior.shape))):
            stack = assimilate_ensemble(prior, o, cfg, members, batch_size=members).stack()
            target.append(np.mean(np.sqrt(np.mean((stack[:, 1] - truth[1]) ** 2, axis=(1, 2)))))
    g, f = float(np.mean(guided)), float(np.mean(free))
    reduction = 1 - g / f
    return CheckResult(
        "6 missing-channel reconstruction",
        reduction >= 0.30,
        f"ch1 RMSE guided {g:.4f} vs unconditional {f:.4f} (reduction {100 * reduction:.1f}%)",
        "reduction >= 30%",
    )


def _brute_crps(members, y):
    r = len(members)
    skill = sum(abs(m - y) for m in members) / r
    pairs = sum(abs(a - b) for i, a in enumerate(members) for j, b in enumerate(members) if i != j)
    return skill - pairs / (2 * r * (r - 1))


@timed
def criterion_7():
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(1000):
        r = int(rng.integers(2, 16))
        m = rng.standard_normal(r)
        y = rng.standard_normal()
        worst = max(worst, abs(float(crps_fair(m, y)) - _brute_crps(m, y)))
    spread = ensemble_spread([0.0, 2.0])
    hist = rank_histogram(rng.standard_normal((10000, 15)), rng.standard_normal(10000), rng)
    p = hist.chi_square()[1]
    ok = worst <= 1e-12 and spread == 3.0 and p > 0.01
    return CheckResult(
        "7 metric suite exactness",
        ok,
        f"CRPS max |diff| {worst:.1e}, spread {{0,2}} = {spread}, rank chi-square p = {p:.3f}",
        "CRPS diff <= 1e-12, spread 3, p > 0.01",
    )


def criterion_8():
    res = check_determinism()
    res.name = "8 determinism and guidance-off equivalence"
    return res


def criterion_9():
    res = check_presets()
    res.name = "9 hyperparameter presets"
    return res


CRITERIA = [criterion_1, criterion_2, criterion_3, criterion_4, criterion_5, criterion_6, criterion_7, criterion_8, criterion_9]


@pytest.mark.parametrize("criterion", CRITERIA, ids=[f"criterion_{i}" for i in range(1, 10)])
def test_criterion(criterion, capsys):
    res = criterion()
    with capsys.disabled():
        print("\n" + res.line())
    assert res.passed, res.line()


if __name__ == "__main__":
    failed = 0
    for crit in CRITERIA:
        res = crit()
        print(res.line(), flush=True)
        failed += not res.passed
    sys.exit(1 if failed else 0)
