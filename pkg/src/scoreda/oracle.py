"""Closed-form references for linear-Gaussian problems and the oracle check suite.

With a Gaussian prior ``N(m, C)``, a selection operator ``H`` and diagonal noise
``R``, the posterior is Gaussian with the Kalman mean and covariance. The VP
marginal at time ``tau`` is ``N(mu m, mu^2 C + sigma_s^2 I)``. Both give exact
targets for the sampler and the score plumbing.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .denoiser.analytic import GaussianAnalyticDenoiser
from .denoiser.base import vjp_finite_difference_check
from .errors import ConfigError
from .guidance import PRESETS, GuidanceConfig, assimilate, assimilate_ensemble
from .obs import ObservationSet, point_set, simulate_pseudo_obs
from .schedule import VP, VPSchedule, adapt_denoiser_to_eps

__all__ = [
    "kalman_posterior",
    "vp_marginal_score",
    "CheckResult",
    "check_linear_gaussian_posterior",
    "check_adapter",
    "check_analytic_vjp",
    "check_determinism",
    "check_presets",
    "run_oracle_checks",
]


def kalman_posterior(prior: GaussianAnalyticDenoiser, obs: ObservationSet):
    """Exact posterior mean and per-entry std, each shaped (C, H, W).

    Only ``C H^T`` (one grid per observation) is formed, so the cost is linear in
    the grid size for a fixed number of observations.
    """
    op = obs.operator
    if op.shape != prior.shape:
        raise ConfigError("observation grid does not match the prior")
    if len(obs) == 0:
        return prior.mean.copy(), np.sqrt(prior.covariance.variance())
    cov = prior.covariance
    cht = cov.matvec(op.adjoint(np.eye(op.dim)))  # (M, C, H, W)
    s = op.apply(cht).T + np.diag(obs.sigma**2)  # H C H^T + R, symmetric
    innovation = obs.values - op.apply(prior.mean)
    chol = np.linalg.cholesky(s)
    w = np.linalg.solve(chol.T, np.linalg.solve(chol, innovation))
    mean = prior.mean + np.tensordot(w, cht, axes=1)
    flat = cht.reshape(op.dim, -1)
    half = np.linalg.solve(chol, flat)  # L^-1 H C
    var = cov.variance().ravel() - np.sum(half * half, axis=0)
    return mean, np.sqrt(np.clip(var, 0.0, None)).reshape(prior.shape)


def vp_marginal_score(prior: GaussianAnalyticDenoiser, x, tau: float, schedule: VPSchedule = VP) -> np.ndarray:
    """Score of ``N(mu m, mu^2 C + sigma_s^2 I)`` at ``x``."""
    m, s = schedule.mu(tau), schedule.sigma_s(tau)
    cov = prior.covariance
    diff = np.asarray(x, dtype=np.float64) - m * prior.mean
    return -cov.spectral_apply(diff, 1.0 / (m**2 * cov.eigenvalues + s**2))


@dataclass
class CheckResult:
    name: str
    passed: bool
    measured: str
    threshold: str
    seconds: float = 0.0

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"[{status}] {self.name}: {self.measured} (threshold {self.threshold}, {self.seconds:.1f}s)"


def _timed(fn):
    def wrapper(*args, **kwargs):
        start = time.perf_counter()
        result = fn(*args, **kwargs)
        result.seconds = time.perf_counter() - start
        return result

    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper


def linear_gaussian_problem(seed: int = 0, size: int = 16, n_obs: int = 12, length_scale: float = 3.0,
                            obs_std: float = 0.1):
    """Prior, truth and ``n_obs`` noisy point observations at distinct random pixels."""
    rng = np.random.default_rng(seed)
    prior = GaussianAnalyticDenoiser.squared_exponential(size, size, length_scale)
    truth = prior.sample_prior(rng)
    flat = rng.choice(size * size, n_obs, replace=False)
    op = point_set(prior.shape, [(0, int(i) // size, int(i) % size) for i in flat])
    return prior, truth, simulate_pseudo_obs(truth, op, obs_std, rng)


@_timed
def check_linear_gaussian_posterior(members: int = 256, seed: int = 0, threads: int = 1) -> CheckResult:
    """Ensemble mean and std from guided sampling against the Kalman posterior.

    The mean tolerance is 10% at 256 members; smaller ensembles get it widened by
    sqrt(256 / members) to track Monte Carlo error.
    """
    tol = 0.10 * max(1.0, np.sqrt(256 / members))
    prior, _, obs = linear_gaussian_problem(seed)
    cfg = GuidanceConfig(n_steps=256, corrections=2, tau_tilde=0.3, gamma=1e-4, seed=seed)
    ens = assimilate_ensemble(prior, obs, cfg, members, threads=threads)
    mean, std = kalman_posterior(prior, obs)
    stack = ens.stack()
    rel = np.linalg.norm(stack.mean(0) - mean) / np.linalg.norm(mean)
    ratio = stack.std(0, ddof=1) / std
    frac = float(np.mean(np.abs(ratio - 1) <= 0.3))
    ok = rel <= tol and frac >= 0.90
    return CheckResult(
        "linear-Gaussian posterior",
        bool(ok),
        f"mean rel L2 {rel:.4f}, std within 30% at {100 * frac:.1f}% of pixels",
        f"rel L2 <= {tol:.2f}, >= 90% of pixels",
    )


@_timed
def check_adapter(n_taus: int = 20, seed: int = 0) -> CheckResult:
    """``-eps / sigma_s`` from the analytic denoiser against the exact VP marginal score."""
    rng = np.random.default_rng(seed)
    prior = GaussianAnalyticDenoiser.squared_exponential(8, 8, 2.0)
    worst = 0.0
    for tau in np.linspace(0.02, 1.0, n_taus):
        m, s = VP.mu(tau), VP.sigma_s(tau)
        x = m * prior.sample_prior(rng) + s * rng.standard_normal(prior.shape)
        got = -adapt_denoiser_to_eps(prior, x, tau) / s
        ref = vp_marginal_score(prior, x, tau)
        worst = max(worst, float(np.linalg.norm(got - ref) / np.linalg.norm(ref)))
    return CheckResult("adapter exactness", worst < 1e-5, f"max rel error {worst:.2e}", "< 1e-5")


@_timed
def check_analytic_vjp(seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    prior = GaussianAnalyticDenoiser.squared_exponential(8, 8, 2.0)
    worst = 0.0
    for sigma in (0.1, 1.0, 10.0):
        x = prior.sample_prior(rng) + sigma * rng.standard_normal(prior.shape)
        ct = rng.standard_normal(prior.shape)
        worst = max(worst, vjp_finite_difference_check(prior, x, sigma, ct, 20, rng=rng))
    return CheckResult("analytic vjp finite differences", worst < 1e-6, f"max rel error {worst:.2e}", "< 1e-6")


@_timed
def check_determinism(seed: int = 0) -> CheckResult:
    prior, _, obs = linear_gaussian_problem(seed, size=8, n_obs=5)
    cfg = GuidanceConfig(n_steps=16, seed=seed)
    a = assimilate(prior, obs, cfg)
    b = assimilate(prior, obs, cfg)
    empty = assimilate(prior, ObservationSet.empty(prior.shape), cfg)
    free = assimilate(prior, None, cfg)
    ok = np.array_equal(a, b) and np.array_equal(empty, free)
    return CheckResult(
        "determinism and guidance-off equivalence", bool(ok),
        f"repeat identical={np.array_equal(a, b)}, empty==unconditional={np.array_equal(empty, free)}",
        "bit-identical",
    )


@_timed
def check_presets() -> CheckResult:
    want = {"default": (64, 2, 0.3, 0.1, 0.001), "missing-channel": (256, 10, 0.3, 0.1, 0.01)}
    got = {k: (c.n_steps, c.corrections, c.tau_tilde, c.obs_std, c.gamma) for k, c in PRESETS.items()}
    ok = all(got.get(k) == v for k, v in want.items())
    return CheckResult("hyperparameter presets", ok, str(got), str(want))


def run_oracle_checks(members: int = 256, threads: int = 1, quick: bool = False) -> list[CheckResult]:
    """All checks that need no trained model. ``quick`` shrinks the ensemble to 32 members."""
    return [
        check_adapter(),
        check_analytic_vjp(),
        check_presets(),
        check_determinism(),
        check_linear_gaussian_posterior(32 if quick else members, threads=threads),
    ]
