"""Noise schedules and the EDM <-> variance-preserving adapter.

The variance-preserving (VP) process noises a state as ``x~ = mu(tau) x + sigma_s(tau) eps``
with ``mu = cos(omega tau)``. An EDM denoiser ``D(x; sigma)`` trained on
``x + sigma eps`` serves VP time ``tau`` when queried at ``x~ / mu`` with
``sigma = sigma_s / mu``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DomainError

__all__ = [
    "VPSchedule",
    "EDMSchedule",
    "VP",
    "mu",
    "sigma_s",
    "edm_sigma_equivalent",
    "adapt_denoiser_to_eps",
    "tau_grid",
]


@dataclass(frozen=True)
class VPSchedule:
    omega: float = math.acos(math.sqrt(1e-3))

    @staticmethod
    def _check(tau: float) -> float:
        tau = float(tau)
        if not 0.0 <= tau <= 1.0:
            raise DomainError(f"diffusion time must lie in [0, 1], got {tau}")
        return tau

    def mu(self, tau: float) -> float:
        return math.cos(self.omega * self._check(tau))

    def sigma_s(self, tau: float) -> float:
        # sin(omega tau) == sqrt(1 - cos^2) on [0, pi/2], without the cancellation
        return math.sin(self.omega * self._check(tau))

    def edm_sigma(self, tau: float) -> float:
        """EDM noise level that serves VP time ``tau``: ``sigma_s / mu``."""
        tau = self._check(tau)
        if tau == 0.0:
            return 0.0
        return math.tan(self.omega * tau)


VP = VPSchedule()


def mu(tau: float) -> float:
    return VP.mu(tau)


def sigma_s(tau: float) -> float:
    return VP.sigma_s(tau)


def edm_sigma_equivalent(tau: float) -> float:
    return VP.edm_sigma(tau)


def adapt_denoiser_to_eps(denoiser, x_tilde, tau: float, schedule: VPSchedule = VP) -> np.ndarray:
    """Noise prediction ``eps(x~, tau)`` from an EDM denoiser.

    ``eps = (x~/mu - D(x~/mu; sigma_s/mu)) * mu / sigma_s``. The VP score is ``-eps / sigma_s``.
    """
    m, s = schedule.mu(tau), schedule.sigma_s(tau)
    if s == 0.0:
        raise DomainError("noise prediction is undefined at tau = 0")
    x = np.asarray(x_tilde, dtype=np.float64) / m
    return (x - denoiser.evaluate(x, s / m)) * (m / s)


def tau_grid(n_steps: int) -> np.ndarray:
    """Uniform diffusion-time grid from 1 down to 0 (``n_steps + 1`` points)."""
    if int(n_steps) != n_steps or n_steps < 2:
        raise ConfigError(f"need at least 2 diffusion steps, got {n_steps}")
    return np.linspace(1.0, 0.0, int(n_steps) + 1)


@dataclass(frozen=True)
class EDMSchedule:
    """Karras-style sigma grid for unconditional EDM sampling.

    The defaults (80, 0.002, rho 7) are EDM conventions, kept as configuration.
    """

    sigma_min: float = 0.002
    sigma_max: float = 80.0
    n_steps: int = 64
    rho: float = 7.0

    def __post_init__(self):
        if not 0 < self.sigma_min < self.sigma_max:
            raise ConfigError("need 0 < sigma_min < sigma_max")
        if self.n_steps < 2:
            raise ConfigError("need at least 2 steps")

    def sigmas(self) -> np.ndarray:
        i = np.arange(self.n_steps) / (self.n_steps - 1)
        lo, hi = self.sigma_min ** (1 / self.rho), self.sigma_max ** (1 / self.rho)
        s = (hi + i * (lo - hi)) ** self.rho
        return np.append(s, 0.0)
