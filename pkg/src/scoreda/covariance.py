"""Symmetric positive-definite covariances over (C, H, W) grids.

Both representations expose an orthonormal eigenbasis, so that shifted solves
``(C + s I)^-1 x``, matrix square roots and products are all exact diagonal
operations after a change of basis.

:class:`KroneckerCovariance` covers the stationary squared-exponential prior used
throughout: ``corr (x) K_rows (x) K_cols + nugget I``. The squared-exponential
kernel separates exactly over rows and columns on a regular grid, so only
three small eigendecompositions are needed regardless of grid size.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError

__all__ = ["se_kernel_1d", "KroneckerCovariance", "DenseCovariance"]


def se_kernel_1d(n: int, length_scale: float) -> np.ndarray:
    """Unit-variance squared-exponential kernel on ``n`` equally spaced points."""
    if not length_scale > 0:
        raise ConfigError(f"length scale must be positive, got {length_scale}")
    d = np.arange(n)[:, None] - np.arange(n)[None, :]
    return np.exp(-0.5 * (d / length_scale) ** 2)


class _EigenCovariance:
    shape: tuple[int, int, int]
    eigenvalues: np.ndarray  # (C, H, W) in the rotated basis

    @property
    def dim(self) -> int:
        c, h, w = self.shape
        return c * h * w

    def to_eigen(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def from_eigen(self, z: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def spectral_apply(self, x, fn_of_eigenvalues) -> np.ndarray:
        z = self.to_eigen(np.asarray(x, dtype=np.float64))
        return self.from_eigen(z * fn_of_eigenvalues)

    def matvec(self, x) -> np.ndarray:
        return self.spectral_apply(x, self.eigenvalues)

    def solve_shifted(self, x, shift: float) -> np.ndarray:
        """``(C + shift I)^-1 x``."""
        return self.spectral_apply(x, 1.0 / (self.eigenvalues + shift))

    def sqrt_matvec(self, z) -> np.ndarray:
        return self.spectral_apply(z, np.sqrt(self.eigenvalues))

    def sample(self, rng: np.random.Generator, n: int | None = None) -> np.ndarray:
        shape = self.shape if n is None else (n, *self.shape)
        return self.sqrt_matvec(rng.standard_normal(shape))

    def dense(self) -> np.ndarray:
        """Explicit ``dim x dim`` matrix (for oracles on small grids)."""
        eye = np.eye(self.dim).reshape(self.dim, *self.shape)
        return self.matvec(eye).reshape(self.dim, self.dim)

    def variance(self) -> np.ndarray:
        """Marginal variance per grid entry."""
        raise NotImplementedError


class KroneckerCovariance(_EigenCovariance):
    def __init__(
        self,
        height: int,
        width: int,
        length_scale: float | tuple[float, float] = 3.0,
        channel_corr=None,
        nugget: float = 1e-6,
    ):
        if channel_corr is None:
            channel_corr = np.eye(1)
        corr = np.atleast_2d(np.asarray(channel_corr, dtype=np.float64))
        if corr.shape[0] != corr.shape[1] or not np.allclose(corr, corr.T):
            raise ConfigError("channel correlation must be a symmetric matrix")
        if not np.allclose(np.diag(corr), 1.0):
            raise ConfigError("channel correlation must have a unit diagonal")
        try:
            np.linalg.cholesky(corr)
        except np.linalg.LinAlgError:
            raise ConfigError("channel correlation matrix is not positive definite") from None
        if nugget < 0:
            raise ConfigError("nugget must be non-negative")
        if np.ndim(length_scale) == 0:
            length_scale = (float(length_scale), float(length_scale))
        self.length_scale = tuple(float(v) for v in length_scale)
        self.channel_corr = corr
        self.nugget = float(nugget)
        self.shape = (corr.shape[0], int(height), int(width))

        factors = [corr, se_kernel_1d(height, self.length_scale[0]), se_kernel_1d(width, self.length_scale[1])]
        self._q = []
        lams = []
        for k in factors:
            lam, q = np.linalg.eigh(k)
            lams.append(np.clip(lam, 0.0, None))
            self._q.append(q)
        self._factor_eigs = lams
        lam = lams[0][:, None, None] * lams[1][None, :, None] * lams[2][None, None, :]
        self.eigenvalues = lam + self.nugget
        if not np.all(self.eigenvalues > 0):
            raise ConfigError("covariance is singular; use a positive nugget")

    @staticmethod
    def _rotate(x, qc, qh, qw):
        z = qh @ (x @ qw)
        if qc.shape[0] == 1:
            return z * qc[0, 0]
        return np.moveaxis(np.tensordot(qc, z, axes=([1], [-3])), 0, -3)

    def to_eigen(self, x):
        qc, qh, qw = self._q
        return self._rotate(x, qc.T, qh.T, qw)

    def from_eigen(self, z):
        qc, qh, qw = self._q
        return self._rotate(z, qc, qh, qw.T)

    def variance(self):
        diags = [(q**2) @ lam for q, lam in zip(self._q, self._factor_eigs)]
        return diags[0][:, None, None] * diags[1][None, :, None] * diags[2][None, None, :] + self.nugget

    def params(self) -> dict:
        return {
            "kind": "kronecker_se",
            "shape": list(self.shape),
            "length_scale": list(self.length_scale),
            "channel_corr": self.channel_corr.tolist(),
            "nugget": self.nugget,
        }

    @classmethod
    def from_params(cls, params: dict) -> "KroneckerCovariance":
        _, h, w = params["shape"]
        return cls(h, w, tuple(params["length_scale"]), params["channel_corr"], params["nugget"])


class DenseCovariance(_EigenCovariance):
    """Arbitrary SPD matrix over a small grid, stored through its eigendecomposition."""

    def __init__(self, matrix, shape: tuple[int, int, int]):
        matrix = np.asarray(matrix, dtype=np.float64)
        dim = int(np.prod(shape))
        if matrix.shape != (dim, dim):
            raise ConfigError(f"covariance must be {dim}x{dim}, got {matrix.shape}")
        if not np.allclose(matrix, matrix.T, atol=1e-12):
            raise ConfigError("covariance must be symmetric")
        lam, q = np.linalg.eigh(matrix)
        if lam.min() <= 0:
            raise ConfigError(f"covariance is not positive definite (min eigenvalue {lam.min():.3e})")
        self.shape = tuple(shape)
        self._q = q
        self.eigenvalues = lam.reshape(shape)
        self._diag = np.diag(matrix).reshape(shape).copy()

    def to_eigen(self, x):
        lead = x.shape[:-3]
        return (x.reshape(*lead, self.dim) @ self._q).reshape(*lead, *self.shape)

    def from_eigen(self, z):
        lead = z.shape[:-3]
        return (z.reshape(*lead, self.dim) @ self._q.T).reshape(*lead, *self.shape)

    def variance(self):
        return self._diag.copy()
