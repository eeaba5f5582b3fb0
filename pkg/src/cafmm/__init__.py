"""Covariate-adjusted functional mixed membership models."""

from .basis import BasisSpec, build_basis, penalty_matrix
from .model import (
    FunctionalDataset,
    HyperParams,
    ModelData,
    ModelDims,
    ParameterState,
    log_posterior,
    log_prior,
    loglik_conditional,
    loglik_integrated,
    mean_curve,
    mixed_cov,
)
from .sampler import ChainStore, SamplerConfig, TemperingConfig, run_chain, sweep, tempered_transition

__version__ = "0.1.0"
