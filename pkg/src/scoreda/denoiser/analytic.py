from __future__ import annotations

import numpy as np

from ..covariance import DenseCovariance, KroneckerCovariance, _EigenCovariance
from ..errors import ConfigError, DomainError
from .base import Denoiser

__all__ = ["GaussianAnalyticDenoiser"]


class GaussianAnalyticDenoiser(Denoiser):
    """Exact posterior mean ``E[x | x + sigma eps]`` under a Gaussian prior N(m, C).

    ``D(x; sigma) = m + C (C + sigma^2 I)^-1 (x - m)``. The map is affine in ``x`` and
    its Jacobian is symmetric, so the vjp applies the same filter to the cotangent.
    """

    def __init__(self, covariance: _EigenCovariance, mean=None):
        self.covariance = covariance
        self.shape = tuple(covariance.shape)
        if mean is None:
            mean = np.zeros(self.shape)
        mean = np.asarray(mean, dtype=np.float64)
        if mean.shape != self.shape:
            raise ConfigError(f"mean shape {mean.shape} does not match covariance {self.shape}")
        self.mean = mean

    @classmethod
    def squared_exponential(cls, height, width, length_scale=3.0, channel_corr=None, nugget=1e-6, mean=None):
        return cls(KroneckerCovariance(height, width, length_scale, channel_corr, nugget), mean)

    @classmethod
    def from_matrix(cls, matrix, shape, mean=None):
        return cls(DenseCovariance(matrix, shape), mean)

    def _check(self, x, sigma):
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-3:] != self.shape:
            raise ConfigError(f"state shape {x.shape[-3:]} does not match prior {self.shape}")
        if sigma < 0:
            raise DomainError(f"sigma must be non-negative, got {sigma}")
        return x

    def _gain(self, sigma):
        lam = self.covariance.eigenvalues
        return lam / (lam + sigma**2)

    def evaluate(self, x, sigma):
        x = self._check(x, sigma)
        if sigma == 0:
            return x.copy()
        return self.mean + self.covariance.spectral_apply(x - self.mean, self._gain(sigma))

    def vjp(self, x, sigma, cotangent):
        self._check(x, sigma)
        ct = np.asarray(cotangent, dtype=np.float64)
        if sigma == 0:
            return ct.copy()
        return self.covariance.spectral_apply(ct, self._gain(sigma))

    def sample_prior(self, rng: np.random.Generator, n: int | None = None) -> np.ndarray:
        return self.mean + self.covariance.sample(rng, n)

    def mmse(self, sigma: float) -> float:
        """Per-entry minimum mean squared denoising error at ``sigma``: tr(C (C + s^2 I)^-1 s^2)/dim."""
        lam = self.covariance.eigenvalues
        return float(np.mean(lam * sigma**2 / (lam + sigma**2)))
