"""Posterior sampling with diffusion guidance.

The sampler runs the variance-preserving reverse process from ``tau = 1`` to ``0``
on a uniform grid. At each step the state moves with an exponential-integrator
(DDIM-type) predictor driven by the posterior score, then takes ``C`` Langevin
corrections at the new time. The posterior score is the prior score from the
denoiser plus the gradient of a Gaussian log-likelihood evaluated at the
denoised state, whose variance is inflated by ``gamma * sigma_s^2 / mu^2``.

States carry a leading batch axis internally so several members can share one
denoiser call; each member draws its noise from its own generator, so results
depend only on the member seed.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np

from .denoiser.base import Denoiser
from .errors import ConfigError, EnsembleError, NumericalError
from .fields import ChannelSpec, Ensemble, FieldGrid, NormStats
from .obs import DEFAULT_OBS_STD, ObservationSet
from .schedule import VP, EDMSchedule, VPSchedule, tau_grid

logger = logging.getLogger(__name__)

__all__ = [
    "GuidanceConfig",
    "PRESETS",
    "preset",
    "LikelihoodModel",
    "prior_score",
    "likelihood_score",
    "posterior_score",
    "lmc_correct",
    "assimilate",
    "assimilate_batch",
    "assimilate_ensemble",
    "member_seed",
    "sample_edm_batch",
]


@dataclass(frozen=True)
class GuidanceConfig:
    n_steps: int = 64
    corrections: int = 2
    tau_tilde: float = 0.3
    gamma: float = 1e-3
    obs_std: float = DEFAULT_OBS_STD
    seed: int = 0

    def __post_init__(self):
        if self.n_steps < 2:
            raise ConfigError("n_steps must be >= 2")
        if self.corrections < 0:
            raise ConfigError("corrections must be >= 0")
        if not self.tau_tilde > 0:
            raise ConfigError("tau_tilde must be > 0")
        if self.gamma < 0:
            raise ConfigError("gamma must be >= 0")
        if not self.obs_std > 0:
            raise ConfigError("obs_std must be > 0")


PRESETS = {
    "default": GuidanceConfig(n_steps=64, corrections=2, tau_tilde=0.3, gamma=1e-3, obs_std=0.1),
    "missing-channel": GuidanceConfig(n_steps=256, corrections=10, tau_tilde=0.3, gamma=1e-2, obs_std=0.1),
}


def preset(name: str, **overrides) -> GuidanceConfig:
    try:
        cfg = PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    return replace(cfg, **overrides)


@dataclass
class LikelihoodModel:
    """Gaussian observation model ``y ~ N(H x, R)`` with diagonal ``R``."""

    obs: ObservationSet

    @property
    def operator(self):
        return self.obs.operator

    @property
    def y(self) -> np.ndarray:
        return self.obs.values

    @property
    def noise_var(self) -> np.ndarray:
        return self.obs.sigma**2

    def __len__(self) -> int:
        return len(self.obs)

    @property
    def empty(self) -> bool:
        return len(self.obs) == 0


def _as_likelihood(likelihood) -> LikelihoodModel | None:
    if likelihood is None:
        return None
    if isinstance(likelihood, ObservationSet):
        likelihood = LikelihoodModel(likelihood)
    return None if likelihood.empty else likelihood


def _guided_terms(x, tau, denoiser, likelihood, gamma, schedule):
    """Prior and likelihood scores at VP state ``x`` (shape (B, C, H, W))."""
    m, s = schedule.mu(tau), schedule.sigma_s(tau)
    if s == 0.0:
        raise ConfigError("scores are evaluated for tau in (0, 1]")
    sigma = s / m
    x_in = x / m
    if likelihood is None:
        x_hat = denoiser.evaluate(x_in, sigma)
        return (x_hat - x_in) * (m / s**2), None
    x_hat, vjp = denoiser.evaluate_with_vjp(x_in, sigma)
    prior = (x_hat - x_in) * (m / s**2)
    residual = likelihood.y - likelihood.operator.apply(x_hat)
    if not np.all(np.isfinite(residual)):
        bad = np.argwhere(~np.isfinite(residual))[0][-1]
        raise NumericalError(f"non-finite residual at observation {int(bad)}", tau=tau)
    var = likelihood.noise_var + sigma**2 * gamma
    # d/dx of -0.5 r^T V^-1 r through x_hat = D(x / mu)
    lik = vjp(likelihood.operator.adjoint(residual / var)) / m
    return prior, lik


def prior_score(x, tau, denoiser: Denoiser, schedule: VPSchedule = VP) -> np.ndarray:
    """VP score ``-eps(x, tau) / sigma_s`` of the prior at diffusion time ``tau``."""
    prior, _ = _guided_terms(np.asarray(x, dtype=np.float64), tau, denoiser, None, 0.0, schedule)
    return prior


def likelihood_score(x, tau, denoiser: Denoiser, likelihood, cfg: GuidanceConfig, schedule: VPSchedule = VP):
    """Gradient in ``x(tau)`` of ``-0.5 r^T V^-1 r`` with ``r = y - H(D(x))``."""
    x = np.asarray(x, dtype=np.float64)
    likelihood = _as_likelihood(likelihood)
    if likelihood is None:
        return np.zeros_like(x)
    _, lik = _guided_terms(x, tau, denoiser, likelihood, cfg.gamma, schedule)
    return lik


def posterior_score(x, tau, denoiser: Denoiser, likelihood, cfg: GuidanceConfig, schedule: VPSchedule = VP):
    x = np.asarray(x, dtype=np.float64)
    prior, lik = _guided_terms(x, tau, denoiser, _as_likelihood(likelihood), cfg.gamma, schedule)
    return prior if lik is None else prior + lik


def _member_axes(x):
    return tuple(range(1, x.ndim))


def lmc_correct(
    x,
    tau: float,
    score_fn: Callable[[np.ndarray, float], np.ndarray],
    corrections: int,
    tau_tilde: float,
    rngs: np.random.Generator | Sequence[np.random.Generator],
) -> np.ndarray:
    """Langevin corrections ``x <- x + delta s(x) + sqrt(2 delta) xi``.

    ``delta = tau_tilde * dim(s) / |s|^2`` is recomputed from the current score on
    every iteration. ``x`` is a single state, or a batch with one generator per
    member (leading axis). Members with an all-zero score skip the step.
    """
    if corrections < 0:
        raise ConfigError("corrections must be >= 0")
    x = np.asarray(x, dtype=np.float64)
    if corrections == 0:
        return x
    single = isinstance(rngs, np.random.Generator)
    if single:
        x, rngs = x[None], [rngs]
    axes = _member_axes(x)
    dim = np.prod(x.shape[1:])
    for _ in range(corrections):
        s = score_fn(x, tau)
        sq = np.sum(s * s, axis=axes)
        noise = np.stack([g.standard_normal(x.shape[1:]) for g in rngs])
        ok = sq > 0
        if not np.all(ok):
            logger.warning("zero score at tau=%.4f for %d member(s); Langevin step skipped", tau, int((~ok).sum()))
        delta = np.where(ok, tau_tilde * dim / np.where(ok, sq, 1.0), 0.0)
        delta = delta.reshape(-1, *([1] * len(axes)))
        x = x + delta * s + np.sqrt(2 * delta) * noise
    return x[0] if single else x


# States live in normalized units; anything this large means the explicit predictor
# has gone unstable (typically tiny observation noise with small gamma and few steps).
DIVERGENCE_BOUND = 1e6


def _check_finite(x, step, tau):
    if not np.all(np.isfinite(x)):
        raise NumericalError(f"non-finite state at step {step} (tau={tau:.6f})", step=step, tau=tau)
    if np.abs(x).max() > DIVERGENCE_BOUND:
        raise NumericalError(
            f"state diverged at step {step} (tau={tau:.6f}); try more steps or a larger gamma",
            step=step, tau=tau,
        )


def assimilate_batch(
    denoiser: Denoiser,
    likelihood,
    cfg: GuidanceConfig,
    rngs: Sequence[np.random.Generator],
    schedule: VPSchedule = VP,
) -> np.ndarray:
    """Run one reverse chain per generator; returns shape (B, C, H, W) at tau = 0."""
    likelihood = _as_likelihood(likelihood)
    shape = tuple(denoiser.shape)
    if likelihood is not None and likelihood.operator.shape != shape:
        raise ConfigError(f"observation grid {likelihood.operator.shape} does not match prior {shape}")
    taus = tau_grid(cfg.n_steps)
    x = np.stack([g.standard_normal(shape) for g in rngs])

    def score(state, tau):
        prior, lik = _guided_terms(state, tau, denoiser, likelihood, cfg.gamma, schedule)
        return prior if lik is None else prior + lik

    for step, (t, t_next) in enumerate(zip(taus[:-1], taus[1:])):
        m, s = schedule.mu(t), schedule.sigma_s(t)
        m_next, s_next = schedule.mu(t_next), schedule.sigma_s(t_next)
        eps = -s * score(x, t)
        ratio = m_next / m
        x = ratio * x + (s_next - ratio * s) * eps
        if t_next > 0:
            x = lmc_correct(x, t_next, score, cfg.corrections, cfg.tau_tilde, rngs)
        _check_finite(x, step, t_next)
    return x


def assimilate(
    denoiser: Denoiser,
    likelihood,
    cfg: GuidanceConfig,
    rng: np.random.Generator | None = None,
    schedule: VPSchedule = VP,
) -> np.ndarray:
    """One posterior sample (C, H, W) in model space; deterministic given the seed.

    With no observations this is plain unconditional sampling.
    """
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    return assimilate_batch(denoiser, likelihood, cfg, [rng], schedule)[0]


def sample_edm_batch(denoiser: Denoiser, edm: EDMSchedule, rngs: Sequence[np.random.Generator]) -> np.ndarray:
    """Unconditional samples with the deterministic second-order (Heun) EDM solver.

    Integrates ``dx/dsigma = (x - D(x; sigma)) / sigma`` over the Karras sigma grid,
    starting from ``sigma_max * N(0, I)``; the last step to ``sigma = 0`` is Euler.
    """
    sigmas = edm.sigmas()
    shape = tuple(denoiser.shape)
    x = sigmas[0] * np.stack([g.standard_normal(shape) for g in rngs])
    for step, (s, s_next) in enumerate(zip(sigmas[:-1], sigmas[1:])):
        d = (x - denoiser.evaluate(x, s)) / s
        x_next = x + (s_next - s) * d
        if s_next > 0:
            d_next = (x_next - denoiser.evaluate(x_next, s_next)) / s_next
            x_next = x + (s_next - s) * 0.5 * (d + d_next)
        x = x_next
        _check_finite(x, step, float(s_next))
    return x


def member_seed(base_seed: int, index: int) -> int:
    """Seed of ensemble member ``index``; independent of ensemble size."""
    return int(np.random.SeedSequence([int(base_seed), int(index)]).generate_state(1, np.uint64)[0])


def assimilate_ensemble(
    denoiser: Denoiser,
    likelihood,
    cfg: GuidanceConfig,
    members: int,
    *,
    threads: int = 1,
    batch_size: int = 32,
    channels: Sequence[ChannelSpec] | None = None,
    norm: NormStats | None = None,
    schedule: VPSchedule = VP,
) -> Ensemble:
    """``members`` independent posterior samples with seeds from :func:`member_seed`.

    Members are processed in fixed index chunks of ``batch_size``; the result does
    not depend on ``threads``. If a chunk fails, its members are rerun one by one
    so that the failure is pinned to seeds; an :class:`EnsembleError` then carries
    the members that did finish.
    """
    if members < 1:
        raise ConfigError("ensemble needs at least one member")
    seeds = [member_seed(cfg.seed, i) for i in range(members)]
    chunks = [list(range(i, min(i + batch_size, members))) for i in range(0, members, batch_size)]

    def run(chunk):
        rngs = [np.random.default_rng(seeds[i]) for i in chunk]
        try:
            return {i: x for i, x in zip(chunk, assimilate_batch(denoiser, likelihood, cfg, rngs, schedule))}
        except NumericalError:
            if len(chunk) == 1:
                return {chunk[0]: None}
            out = {}
            for i in chunk:
                out.update(run([i]))
            return out

    results: dict[int, np.ndarray | None] = {}
    if threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            for part in pool.map(run, chunks):
                results.update(part)
    else:
        for chunk in chunks:
            results.update(run(chunk))

    c = denoiser.shape[0]
    channels = tuple(channels) if channels is not None else tuple(ChannelSpec(f"ch{i}") for i in range(c))
    norm = norm if norm is not None else NormStats.identity(c)
    done = [i for i in range(members) if results[i] is not None]
    failed = [seeds[i] for i in range(members) if results[i] is None]
    grids = [FieldGrid(channels, results[i], norm) for i in done]
    if failed:
        partial = Ensemble(grids, [seeds[i] for i in done]) if grids else None
        raise EnsembleError(failed, partial)
    return Ensemble(grids, seeds)
