"""Score-based data assimilation: diffusion priors guided by sparse observations."""

__version__ = "0.1.0"

from .errors import ConfigError, DomainError, EnsembleError, IngestError, NumericalError, ScoreDAError
from .fields import ChannelSpec, Ensemble, FieldGrid, NormStats, read_grid, write_grid
from .schedule import VP, EDMSchedule, VPSchedule, adapt_denoiser_to_eps, edm_sigma_equivalent, tau_grid
from .covariance import DenseCovariance, KroneckerCovariance
from .denoiser import Denoiser, GaussianAnalyticDenoiser
from .obs import ObsOperator, Observation, ObservationSet, point_set, regular_stride, simulate_pseudo_obs
from .guidance import (
    PRESETS,
    GuidanceConfig,
    LikelihoodModel,
    assimilate,
    assimilate_ensemble,
    likelihood_score,
    posterior_score,
    preset,
)
from .metrics import crps_fair, ensemble_spread, evaluate_ensemble, rank_histogram
