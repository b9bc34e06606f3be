"""Prior backends. The convolutional backend (torch) is imported lazily from ``.conv``."""

from .analytic import GaussianAnalyticDenoiser
from .base import Denoiser, score_from_denoiser, vjp_finite_difference_check
