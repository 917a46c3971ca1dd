"""Bayesian calibration of the HCM speed-flow curve from loop-detector data."""

from .model import DomainError, SpeedFlowParams, density, predict_speed, speed_at_capacity
from .mcmc import (ChainSet, LikelihoodSpec, McmcConfig, PriorSpec, gelman_rubin,
                   log_posterior, run_chains)
from .posterior import credible_band, summarize

__version__ = "0.1.0"

__all__ = [
    "DomainError",
    "SpeedFlowParams",
    "density",
    "predict_speed",
    "speed_at_capacity",
    "ChainSet",
    "LikelihoodSpec",
    "McmcConfig",
    "PriorSpec",
    "gelman_rubin",
    "log_posterior",
    "run_chains",
    "credible_band",
    "summarize",
    "__version__",
]
