from __future__ import annotations

from typing import Callable

import numpy as np

from ..errors import DomainError

__all__ = ["Denoiser", "score_from_denoiser", "vjp_finite_difference_check"]


class Denoiser:
    """Common contract for prior backends.

    ``evaluate(x, sigma)`` maps a noisy state (shape ``(..., C, H, W)``) at EDM noise
    level ``sigma`` to an estimate of the clean state, and ``vjp(x, sigma, cotangent)``
    returns ``J^T cotangent`` where ``J`` is the Jacobian of ``evaluate`` in ``x``.
    Leading axes are independent batch members.
    """

    shape: tuple[int, int, int]

    def evaluate(self, x: np.ndarray, sigma: float) -> np.ndarray:
        raise NotImplementedError

    def vjp(self, x: np.ndarray, sigma: float, cotangent: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def evaluate_with_vjp(
        self, x: np.ndarray, sigma: float
    ) -> tuple[np.ndarray, Callable[[np.ndarray], np.ndarray]]:
        """Evaluate once and return a closure for the vjp at the same point.

        Backends that can reuse the forward pass override this.
        """
        return self.evaluate(x, sigma), lambda ct: self.vjp(x, sigma, ct)


def score_from_denoiser(x, sigma: float, denoiser: Denoiser) -> np.ndarray:
    """Score of the noised prior, ``(D(x; sigma) - x) / sigma^2``."""
    if not sigma > 0:
        raise DomainError("the score is undefined at sigma = 0")
    x = np.asarray(x, dtype=np.float64)
    return (denoiser.evaluate(x, sigma) - x) / sigma**2


def vjp_finite_difference_check(
    denoiser: Denoiser,
    x,
    sigma: float,
    cotangent,
    n_directions: int = 20,
    eps: float = 1e-4,
    rng: np.random.Generator | None = None,
) -> float:
    """Max relative error between the vjp and central differences.

    For each random unit direction ``v``, compares ``<vjp(ct), v>`` with
    ``(<ct, D(x + eps v)> - <ct, D(x - eps v)>) / (2 eps)``. Errors are relative to
    ``|vjp(ct)|`` (the largest directional derivative possible), which keeps the
    measure meaningful for directions nearly orthogonal to the gradient.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    x = np.asarray(x, dtype=np.float64)
    ct = np.asarray(cotangent, dtype=np.float64)
    g = denoiser.vjp(x, sigma, ct)
    scale = np.linalg.norm(g)
    worst = 0.0
    for _ in range(n_directions):
        v = rng.standard_normal(x.shape)
        v /= np.linalg.norm(v)
        fd = (
            np.vdot(ct, denoiser.evaluate(x + eps * v, sigma))
            - np.vdot(ct, denoiser.evaluate(x - eps * v, sigma))
        ) / (2 * eps)
        err = abs(np.vdot(g, v) - fd)
        if scale > 0:
            err /= scale
        worst = max(worst, err)
    return float(worst)
