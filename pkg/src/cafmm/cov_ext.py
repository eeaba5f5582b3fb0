"""Covariate-dependent covariance: loadings ``phi_km + xi_km x_i``.

The extension adds, per feature ``k`` and component ``m``, a ``P x R``
matrix ``xi_km`` with its own multiplicative gamma process prior indexed by
(feature, covariate). The Gibbs and Metropolis updates for ``xi`` and its
hierarchy live in :mod:`cafmm.sampler`, which treats every linear coefficient
block generically; this module holds the container and the closed-form
quantities that are specific to the extension.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np

from .errors import ShapeError, ValidationError
from .model import (
    ModelData,
    ParameterState,
    loglik_conditional,
    mixed_cov,
    shrinkage_logprior,
)


@dataclass
class XiBlock:
    """Covariance-adjustment coefficients and their shrinkage hierarchy.

    xi : K x M x P x R
    delta_xi : K x R x M
    a1_xi, a2_xi : K x R
    gamma_xi : K x R x P x M
    """

    xi: np.ndarray
    delta_xi: np.ndarray
    a1_xi: np.ndarray
    a2_xi: np.ndarray
    gamma_xi: np.ndarray

    @classmethod
    def zeros(cls, K: int, M: int, P: int, R: int) -> "XiBlock":
        return cls(
            xi=np.zeros((K, M, P, R)),
            delta_xi=np.ones((K, R, M)),
            a1_xi=np.full((K, R), 2.0),
            a2_xi=np.full((K, R), 3.0),
            gamma_xi=np.ones((K, R, P, M)),
        )

    def copy(self) -> "XiBlock":
        return copy.deepcopy(self)

    def validate(self, K, M, P, R) -> None:
        shapes = {
            "xi": (K, M, P, R), "delta_xi": (K, R, M), "a1_xi": (K, R),
            "a2_xi": (K, R), "gamma_xi": (K, R, P, M),
        }
        for name, shp in shapes.items():
            if np.shape(getattr(self, name)) != shp:
                raise ShapeError(f"{name} has shape {np.shape(getattr(self, name))}, expected {shp}")
        for name in ("delta_xi", "a1_xi", "a2_xi", "gamma_xi"):
            if np.any(~(getattr(self, name) > 0)):
                raise ValidationError(f"{name} must be strictly positive")

    def tilde_tau(self) -> np.ndarray:
        return np.cumprod(self.delta_xi, axis=2)

    def coef_groups(self) -> np.ndarray:
        """xi rearranged as (K*R) x P x M to match the shrinkage layout."""
        K, M, P, R = self.xi.shape
        return np.transpose(self.xi, (0, 3, 2, 1)).reshape(K * R, P, M)

    def log_prior(self, hyper) -> float:
        K, M, P, R = self.xi.shape
        if R == 0:
            return 0.0
        return shrinkage_logprior(
            self.coef_groups(),
            self.gamma_xi.reshape(K * R, P, M),
            self.delta_xi.reshape(K * R, M),
            self.a1_xi.reshape(-1),
            self.a2_xi.reshape(-1),
            hyper.nu_gamma, hyper.alpha1, hyper.beta1, hyper.alpha2, hyper.beta2,
        )


def with_xi(state: ParameterState, xi: XiBlock | None) -> ParameterState:
    out = state.copy()
    out.ext = None if xi is None else xi.copy()
    return out


def loglik_conditional_ext(state: ParameterState, xi: XiBlock, data: ModelData) -> float:
    """Conditional log-likelihood with loadings ``phi_km + xi_km x_i``."""
    return loglik_conditional(with_xi(state, xi), data)


def mixed_cov_ext(state: ParameterState, xi: XiBlock, z, x, S: np.ndarray) -> np.ndarray:
    return mixed_cov(with_xi(state, xi), z, S, x=np.atleast_1d(np.asarray(x, dtype=float)))


def attach_xi(state: ParameterState, rng=None, scale: float = 0.0) -> ParameterState:
    """Give ``state`` a zero (or small random) xi block; returns the same object."""
    K, P, M, R = state.dims.K, state.dims.P, state.dims.M, state.dims.R
    block = XiBlock.zeros(K, M, P, R)
    if rng is not None and scale > 0:
        block.xi = scale * rng.standard_normal(block.xi.shape)
    state.ext = block
    return state
