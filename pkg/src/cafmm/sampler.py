"""Metropolis-within-Gibbs sampler with optional tempered transitions.

Every update takes an inverse temperature ``beta`` that multiplies the
log-likelihood only. Conditionals are exposed as small distribution objects
(``*_conditional``) and Metropolis steps expose their log acceptance ratio so
the audits in the test suite can compare both against
:func:`cafmm.model.log_posterior`.

Internally the data enter only through per-curve sufficient statistics
``G_i = S_i S_i'``, ``S_i y_i`` and ``y_i'y_i``: each linear coefficient
block (``phi``, ``nu``, ``eta``, ``xi``) shifts the fitted basis coefficients
``c_i`` by ``w_i * theta`` for a block-specific scalar weight ``w_i``.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import gammaln, log_ndtr

from .errors import ConfigurationError, LinAlgFailure
from .model import (
    LOG2PI,
    HyperParams,
    ModelData,
    ParameterState,
    dirichlet_logpdf,
    feature_coef,
    fitted_coef,
    loadings,
    log_posterior,
    loglik_conditional,
    rw_precision,
)

log = logging.getLogger(__name__)

Z_EPS = 1e-8
RW_JITTER = 1e-10


# ---------------------------------------------------------------- configuration

@dataclass
class TemperingConfig:
    enabled: bool = False
    n_temps: int = 10
    beta_min: float = 0.2
    interval: int = 100
    schedule: str = "geometric"

    def __post_init__(self):
        if self.n_temps < 1:
            raise ConfigurationError("tempering n_temps must be >= 1")
        if not 0 < self.beta_min <= 1:
            raise ConfigurationError("tempering beta_min must lie in (0, 1]")
        if self.interval < 1:
            raise ConfigurationError("tempering interval must be >= 1")
        if self.schedule != "geometric":
            raise ConfigurationError("only the geometric schedule is supported")


@dataclass
class SamplerConfig:
    n_iter: int = 2000
    burn_in: int = 1000
    thin: int = 1
    seed: int = 0
    n_starts: int = 1
    start_iters: int = 50
    tempering: TemperingConfig = field(default_factory=TemperingConfig)
    store_shrinkage: bool = False

    def __post_init__(self):
        if isinstance(self.tempering, dict):
            self.tempering = TemperingConfig(**self.tempering)
        if self.n_iter < 1 or not 0 <= self.burn_in < self.n_iter:
            raise ConfigurationError("need 0 <= burn_in < n_iter")
        if self.thin < 1:
            raise ConfigurationError("thin must be >= 1")
        if self.n_starts < 1 or self.start_iters < 0:
            raise ConfigurationError("n_starts must be >= 1 and start_iters >= 0")
        if not 0 <= int(self.seed) < 2**64:
            raise ConfigurationError("seed must be a 64-bit unsigned integer")

    def to_dict(self) -> dict:
        return asdict(self)


def temperature_ladder(n_temps: int, beta_min: float) -> np.ndarray:
    """Geometric inverse temperatures from 1 down to ``beta_min`` (length n_temps+1)."""
    return np.power(float(beta_min), np.arange(n_temps + 1) / n_temps)


# ------------------------------------------------------------ distributions

class GaussianConditional:
    """Multivariate normal parameterised by its precision ``Q`` and ``Q @ mean``."""

    def __init__(self, precision: np.ndarray, linear: np.ndarray):
        try:
            self.chol = np.linalg.cholesky(precision)
        except np.linalg.LinAlgError as exc:
            raise LinAlgFailure("conditional precision is not positive definite") from exc
        self.precision = precision
        y = solve_triangular(self.chol, linear, lower=True, check_finite=False)
        self.mean = solve_triangular(self.chol.T, y, lower=False, check_finite=False)

    @property
    def cov(self) -> np.ndarray:
        return np.linalg.inv(self.precision)

    def logpdf(self, x) -> float:
        q = self.chol.T @ (np.asarray(x) - self.mean)
        n = self.mean.size
        return float(-0.5 * q @ q + np.log(np.diag(self.chol)).sum() - 0.5 * n * LOG2PI)

    def sample(self, rng) -> np.ndarray:
        e = rng.standard_normal(self.mean.size)
        return self.mean + solve_triangular(self.chol.T, e, lower=False, check_finite=False)


@dataclass
class NormalConditional:
    """Independent univariate normals (vectorised)."""

    mean: np.ndarray
    var: np.ndarray

    def logpdf(self, x):
        return -0.5 * (LOG2PI + np.log(self.var) + (x - self.mean) ** 2 / self.var)

    def sample(self, rng):
        return self.mean + np.sqrt(self.var) * rng.standard_normal(np.shape(self.mean))


@dataclass
class GammaConditional:
    """Gamma with shape/rate (vectorised)."""

    shape: object
    rate: object

    def logpdf(self, x):
        a, b = self.shape, self.rate
        return a * np.log(b) - gammaln(a) + (a - 1) * np.log(x) - b * x

    def sample(self, rng):
        return rng.gamma(self.shape, 1.0 / np.asarray(self.rate))


@dataclass
class InvGammaConditional:
    shape: float
    scale: float

    def logpdf(self, x):
        a, b = self.shape, self.scale
        return a * np.log(b) - gammaln(a) - (a + 1) * np.log(x) - b / x

    def sample(self, rng):
        return self.scale / rng.gamma(self.shape)


def truncnorm_logpdf(x, mean, sd):
    """Density of N(mean, sd^2) truncated to (0, inf)."""
    z = (x - mean) / sd
    return -0.5 * z * z - np.log(sd) - 0.5 * LOG2PI - log_ndtr(mean / sd)


def truncnorm_sample(rng, mean, sd):
    # mean > 0 so each attempt succeeds with probability > 1/2
    while True:
        x = mean + sd * rng.standard_normal()
        if x > 0:
            return x


def dirichlet_sample(rng, alpha: np.ndarray) -> np.ndarray:
    """Dirichlet draws computed in log space (rows of ``alpha``).

    Uses ``G(a) = G(a + 1) * U^(1/a)`` so that tiny shapes do not underflow
    before normalisation. Entries may still round to zero, in which case the
    caller rejects the proposal.
    """
    alpha = np.asarray(alpha, dtype=float)
    g = rng.gamma(alpha + 1.0)
    u = rng.random(alpha.shape)
    logg = np.log(g) + np.log(u) / alpha
    mx = logg.max(axis=-1, keepdims=True)
    w = np.exp(logg - mx)
    return w / w.sum(axis=-1, keepdims=True)


# ------------------------------------------------------------------- cache

class CoefCache:
    """Fitted coefficients ``c_i`` kept in sync with the state inside a sweep."""

    def __init__(self, state: ParameterState, data: ModelData):
        self.c = fitted_coef(state, data.X)


def _coefs(state, data, cache):
    return cache.c if cache is not None else fitted_coef(state, data.X)


# -------------------------------------------------- generic linear blocks

def _linear_block(state, data, w, theta, prior_prec, beta, c):
    s = beta / state.sigma2
    r = c - np.outer(w, theta)
    G = data.G
    prec = prior_prec + s * np.einsum("i,ipq->pq", w * w, G)
    lin = s * (w @ data.Sy - np.einsum("ipq,iq->p", G, w[:, None] * r))
    return GaussianConditional(prec, lin)


def _apply_linear(cache, w, delta_theta):
    if cache is not None:
        cache.c += np.outer(w, delta_theta)


def _rw_prior(data, hyper, tau, w):
    Q = tau * rw_precision(data.P, hyper.rw_ridge)
    if hyper.rw_ridge == 0 and not np.any(w):
        Q = Q + RW_JITTER * np.eye(data.P)
    return Q


def phi_weights(state, j, m):
    return state.Z[:, j] * state.chi[:, m]


def phi_conditional(state, data, hyper, j, m, beta=1.0, c=None):
    w = phi_weights(state, j, m)
    prior = np.diag(state.gamma[j, :, m] * state.tilde_tau()[j, m])
    c = fitted_coef(state, data.X) if c is None else c
    return _linear_block(state, data, w, state.phi[j, m], prior, beta, c)


def update_phi(state, data, hyper, rng, j, m, beta=1.0, cache=None):
    cond = phi_conditional(state, data, hyper, j, m, beta, _coefs(state, data, cache))
    new = cond.sample(rng)
    _apply_linear(cache, phi_weights(state, j, m), new - state.phi[j, m])
    state.phi[j, m] = new
    return state


def nu_conditional(state, data, hyper, j, beta=1.0, c=None):
    w = state.Z[:, j]
    prior = _rw_prior(data, hyper, state.tau_nu[j], w)
    c = fitted_coef(state, data.X) if c is None else c
    return _linear_block(state, data, w, state.nu[j], prior, beta, c)


def update_nu(state, data, hyper, rng, j, beta=1.0, cache=None):
    cond = nu_conditional(state, data, hyper, j, beta, _coefs(state, data, cache))
    new = cond.sample(rng)
    _apply_linear(cache, state.Z[:, j], new - state.nu[j])
    state.nu[j] = new
    return state


def eta_conditional(state, data, hyper, j, d, beta=1.0, c=None):
    w = state.Z[:, j] * data.X[:, d]
    prior = _rw_prior(data, hyper, state.tau_eta[j, d], w)
    c = fitted_coef(state, data.X) if c is None else c
    return _linear_block(state, data, w, state.eta[j, :, d], prior, beta, c)


def update_eta(state, data, hyper, rng, j, d, beta=1.0, cache=None):
    cond = eta_conditional(state, data, hyper, j, d, beta, _coefs(state, data, cache))
    new = cond.sample(rng)
    _apply_linear(cache, state.Z[:, j] * data.X[:, d], new - state.eta[j, :, d])
    state.eta[j, :, d] = new
    return state


def xi_weights(state, data, k, d, m):
    return state.Z[:, k] * state.chi[:, m] * data.X[:, d]


def xi_conditional(state, data, hyper, k, d, m, beta=1.0, c=None):
    ext = state.ext
    w = xi_weights(state, data, k, d, m)
    prior = np.diag(ext.gamma_xi[k, d, :, m] * ext.tilde_tau()[k, d, m])
    c = fitted_coef(state, data.X) if c is None else c
    return _linear_block(state, data, w, ext.xi[k, m, :, d], prior, beta, c)


def update_xi(state, data, hyper, rng, k, d, m, beta=1.0, cache=None):
    cond = xi_conditional(state, data, hyper, k, d, m, beta, _coefs(state, data, cache))
    new = cond.sample(rng)
    _apply_linear(cache, xi_weights(state, data, k, d, m), new - state.ext.xi[k, m, :, d])
    state.ext.xi[k, m, :, d] = new
    return state


# ------------------------------------------- multiplicative gamma process

def mgp_delta_conditional(coef, gamma, delta, a1, a2, h) -> GammaConditional:
    """Conditional of ``delta[h]`` for one group; ``coef``/``gamma`` are P x M."""
    P, M = coef.shape
    s = np.sum(gamma * coef**2, axis=0)
    d = np.array(delta, dtype=float)
    d[h] = 1.0
    prods = np.cumprod(d)
    shape = (a1 if h == 0 else a2) + 0.5 * P * (M - h)
    rate = 1.0 + 0.5 * np.sum(s[h:] * prods[h:])
    return GammaConditional(shape, rate)


def mgp_gamma_conditional(coef, delta, nu_gamma) -> GammaConditional:
    """Conditional of every local precision of one group (P x M arrays)."""
    tt = np.cumprod(delta)
    return GammaConditional(0.5 * (nu_gamma + 1.0), 0.5 * (nu_gamma + coef**2 * tt[None, :]))


def a_log_target(a, log_delta_sum, count, alpha, rate):
    """Unnormalised log density of a shape hyperparameter of the gamma process."""
    return (a - 1.0) * log_delta_sum + (alpha - 1.0) * np.log(a) - rate * a - count * gammaln(a)


def a_log_accept(a_old, a_new, log_delta_sum, count, alpha, rate, eps):
    sd = np.sqrt(eps / rate)
    return (
        a_log_target(a_new, log_delta_sum, count, alpha, rate)
        - a_log_target(a_old, log_delta_sum, count, alpha, rate)
        + truncnorm_logpdf(a_old, a_new, sd)
        - truncnorm_logpdf(a_new, a_old, sd)
    )


def _mh_accept(rng, log_ratio) -> bool:
    return bool(np.log(rng.random()) < log_ratio)


def _a_step(rng, a_old, log_delta_sum, count, alpha, rate, eps):
    sd = np.sqrt(eps / rate)
    a_new = truncnorm_sample(rng, a_old, sd)
    lr = a_log_accept(a_old, a_new, log_delta_sum, count, alpha, rate, eps)
    if _mh_accept(rng, lr):
        return a_new, True
    return a_old, False


def _phi_group(state, k):
    return state.phi[k].T  # P x M


def delta_conditional(state, hyper, k, h) -> GammaConditional:
    return mgp_delta_conditional(_phi_group(state, k), state.gamma[k], state.delta[k], state.a1[k], state.a2[k], h)


def update_delta(state, hyper, rng, k, h=None):
    for hh in range(state.delta.shape[1]) if h is None else [h]:
        state.delta[k, hh] = delta_conditional(state, hyper, k, hh).sample(rng)
    return state


def a1_log_accept(state, hyper, k, a_new):
    return a_log_accept(state.a1[k], a_new, np.log(state.delta[k, 0]), 1, hyper.alpha1, hyper.beta1, hyper.eps1)


def a2_log_accept(state, hyper, k, a_new):
    ld = np.sum(np.log(state.delta[k, 1:]))
    return a_log_accept(state.a2[k], a_new, ld, state.delta.shape[1] - 1, hyper.alpha2, hyper.beta2, hyper.eps2)


def update_a1(state, hyper, rng, k, counters=None):
    state.a1[k], acc = _a_step(rng, state.a1[k], np.log(state.delta[k, 0]), 1, hyper.alpha1, hyper.beta1, hyper.eps1)
    _count(counters, "a1", acc)
    return state


def update_a2(state, hyper, rng, k, counters=None):
    ld = np.sum(np.log(state.delta[k, 1:]))
    state.a2[k], acc = _a_step(rng, state.a2[k], ld, state.delta.shape[1] - 1, hyper.alpha2, hyper.beta2, hyper.eps2)
    _count(counters, "a2", acc)
    return state


def gamma_conditional(state, hyper, k) -> GammaConditional:
    return mgp_gamma_conditional(_phi_group(state, k), state.delta[k], hyper.nu_gamma)


def update_gamma(state, hyper, rng):
    for k in range(state.gamma.shape[0]):
        state.gamma[k] = gamma_conditional(state, hyper, k).sample(rng)
    return state


# xi hierarchy: groups indexed by (feature k, covariate d)

def _xi_group(state, k, d):
    return state.ext.xi[k, :, :, d].T  # P x M


def delta_xi_conditional(state, hyper, k, d, h) -> GammaConditional:
    e = state.ext
    return mgp_delta_conditional(_xi_group(state, k, d), e.gamma_xi[k, d], e.delta_xi[k, d], e.a1_xi[k, d], e.a2_xi[k, d], h)


def gamma_xi_conditional(state, hyper, k, d) -> GammaConditional:
    return mgp_gamma_conditional(_xi_group(state, k, d), state.ext.delta_xi[k, d], hyper.nu_gamma)


def a1_xi_log_accept(state, hyper, k, d, a_new):
    e = state.ext
    return a_log_accept(e.a1_xi[k, d], a_new, np.log(e.delta_xi[k, d, 0]), 1, hyper.alpha1, hyper.beta1, hyper.eps1)


def a2_xi_log_accept(state, hyper, k, d, a_new):
    e = state.ext
    ld = np.sum(np.log(e.delta_xi[k, d, 1:]))
    return a_log_accept(e.a2_xi[k, d], a_new, ld, e.delta_xi.shape[2] - 1, hyper.alpha2, hyper.beta2, hyper.eps2)


def update_shrinkage_xi(state, hyper, rng, counters=None):
    """Refresh delta_xi, a_xi and gamma_xi for every (feature, covariate) group."""
    e = state.ext
    K, R, M = e.delta_xi.shape
    for k in range(K):
        for d in range(R):
            for h in range(M):
                e.delta_xi[k, d, h] = delta_xi_conditional(state, hyper, k, d, h).sample(rng)
    for k in range(K):
        for d in range(R):
            e.a1_xi[k, d], acc = _a_step(rng, e.a1_xi[k, d], np.log(e.delta_xi[k, d, 0]), 1,
                                         hyper.alpha1, hyper.beta1, hyper.eps1)
            _count(counters, "a1_xi", acc)
            ld = np.sum(np.log(e.delta_xi[k, d, 1:]))
            e.a2_xi[k, d], acc = _a_step(rng, e.a2_xi[k, d], ld, M - 1, hyper.alpha2, hyper.beta2, hyper.eps2)
            _count(counters, "a2_xi", acc)
    for k in range(K):
        for d in range(R):
            e.gamma_xi[k, d] = gamma_xi_conditional(state, hyper, k, d).sample(rng)
    return state


# ------------------------------------------------------------- smoothing

def tau_conditional(state, data, hyper):
    """Gamma conditionals of (tau_nu, tau_eta)."""
    P = data.P
    Q = rw_precision(P, hyper.rw_ridge)
    qn = np.einsum("kp,pq,kq->k", state.nu, Q, state.nu)
    qe = np.einsum("kpr,pq,kqr->kr", state.eta, Q, state.eta)
    return (
        GammaConditional(hyper.alpha_nu + 0.5 * P, hyper.beta_nu + 0.5 * qn),
        GammaConditional(hyper.alpha_eta + 0.5 * P, hyper.beta_eta + 0.5 * qe),
    )


def update_tau(state, data, hyper, rng):
    cn, ce = tau_conditional(state, data, hyper)
    state.tau_nu = np.asarray(cn.sample(rng), dtype=float).reshape(state.tau_nu.shape)
    if state.tau_eta.size:
        state.tau_eta = np.asarray(ce.sample(rng), dtype=float).reshape(state.tau_eta.shape)
    return state


# --------------------------------------------------------------- sigma^2

def residual_ss(state, data) -> float:
    c = fitted_coef(state, data.X)
    mu = np.einsum("lp,lp->l", data.B_long, c[data.obs_index])
    r = data.y_long - mu
    return float(r @ r)


def sigma2_conditional(state, data, hyper, beta=1.0) -> InvGammaConditional:
    rss = residual_ss(state, data)
    return InvGammaConditional(hyper.alpha0 + 0.5 * beta * data.n_total, hyper.beta0 + 0.5 * beta * rss)


def update_sigma2(state, data, hyper, rng, beta=1.0):
    state.sigma2 = float(sigma2_conditional(state, data, hyper, beta).sample(rng))
    return state


# ------------------------------------------------------------------- chi

def chi_conditional(state, data, m, beta=1.0, c=None) -> NormalConditional:
    """Conditionals of ``chi[:, m]`` (independent across curves)."""
    c = fitted_coef(state, data.X) if c is None else c
    a = np.einsum("ik,ikp->ip", state.Z, loadings(state, data.X)[:, :, m, :])
    s = beta / state.sigma2
    Ga = np.einsum("ipq,iq->ip", data.G, a)
    prec = 1.0 + s * np.einsum("ip,ip->i", a, Ga)
    r = c - state.chi[:, m, None] * a
    lin = s * (np.einsum("ip,ip->i", a, data.Sy) - np.einsum("ip,ip->i", Ga, r))
    return NormalConditional(lin / prec, 1.0 / prec)


def update_chi(state, data, rng, m, beta=1.0, cache=None):
    c = _coefs(state, data, cache)
    cond = chi_conditional(state, data, m, beta, c)
    new = cond.sample(rng)
    if cache is not None:
        a = np.einsum("ik,ikp->ip", state.Z, loadings(state, data.X)[:, :, m, :])
        cache.c += (new - state.chi[:, m])[:, None] * a
    state.chi[:, m] = new
    return state


# -------------------------------------------------------------------- Z

def clamp_simplex(Z: np.ndarray, eps: float = Z_EPS) -> np.ndarray:
    """Move rows touching the boundary into the interior (renormalised)."""
    Z = np.array(Z, dtype=float, copy=True)
    if Z.shape[-1] < 2:
        return Z
    bad = np.any(Z <= 0, axis=-1) | np.any(Z >= 1, axis=-1)
    if np.any(bad):
        log.info("clamping %d boundary allocation rows", int(bad.sum()))
        Zb = Z[bad] + eps
        Z[bad] = Zb / Zb.sum(axis=-1, keepdims=True)
    return Z


def dirichlet_proposal_logpdf(x, center, scale):
    return dirichlet_logpdf(x, scale * np.asarray(center))


def z_log_target(state, data, hyper, Z_new, beta=1.0, F=None, c=None):
    """Row-wise log target of candidate rows ``Z_new`` relative to the current likelihood.

    Entry ``i`` equals ``log p(z_i | rest) + const_i`` where the constant does
    not depend on the candidate row; differences between two candidates are
    exact.
    """
    if F is None:
        F = feature_coef(state, data.X)
    if c is None:
        c = np.einsum("ik,ikp->ip", state.Z, F)
    cn = np.einsum("ik,ikp->ip", Z_new, F)
    d = cn - c
    drss = np.einsum("ip,ipq,iq->i", d, data.G, cn + c) - 2.0 * np.einsum("ip,ip->i", d, data.Sy)
    with np.errstate(divide="ignore"):
        prior = np.sum((state.alpha3 * state.pi - 1.0) * np.log(Z_new), axis=1)
    return prior - 0.5 * beta / state.sigma2 * drss


def z_log_accept(state, data, hyper, Z_new, beta=1.0, F=None):
    """Per-row log acceptance ratio for replacing each row of Z with ``Z_new``."""
    if F is None:
        F = feature_coef(state, data.X)
    c = np.einsum("ik,ikp->ip", state.Z, F)
    lt_new = z_log_target(state, data, hyper, Z_new, beta, F, c)
    lt_old = z_log_target(state, data, hyper, state.Z, beta, F, c)
    with np.errstate(divide="ignore", invalid="ignore"):
        q_back = dirichlet_proposal_logpdf(state.Z, Z_new, hyper.a_z)
        q_fwd = dirichlet_proposal_logpdf(Z_new, state.Z, hyper.a_z)
    with np.errstate(invalid="ignore"):
        lr = lt_new - lt_old + q_back - q_fwd
    bad = ~np.all((Z_new > 0) & (Z_new < 1), axis=1) | ~np.isfinite(lr)
    lr = np.where(bad, -np.inf, lr)
    return lr


def update_Z(state, data, hyper, rng, i=None, beta=1.0, cache=None, counters=None):
    """Dirichlet random-walk update of allocation rows (all rows when ``i`` is None).

    Rows are conditionally independent, so updating all of them at once is
    the same kernel as a sequential scan.
    """
    K = state.Z.shape[1]
    if K == 1:
        return state
    state.Z = clamp_simplex(state.Z)
    rows = np.arange(state.Z.shape[0]) if i is None else np.atleast_1d(i)
    F = feature_coef(state, data.X)
    prop = state.Z.copy()
    prop[rows] = dirichlet_sample(rng, hyper.a_z * state.Z[rows])
    lr = z_log_accept(state, data, hyper, prop, beta, F)
    u = rng.random(rows.size)
    acc = np.zeros(state.Z.shape[0], dtype=bool)
    acc[rows] = np.log(u) < lr[rows]
    if np.any(acc):
        state.Z = np.where(acc[:, None], prop, state.Z)
        if cache is not None:
            cache.c = np.einsum("ik,ikp->ip", state.Z, F)
    _count(counters, "Z", int(acc.sum()), rows.size)
    return state


# ------------------------------------------------------------- pi, alpha3

def _z_log_sums(state):
    return np.log(state.Z).sum(axis=0)


def pi_log_target(state, hyper, pi, logz_sum=None):
    N, K = state.Z.shape
    if logz_sum is None:
        logz_sum = _z_log_sums(state)
    a = state.alpha3 * pi
    lp = N * (gammaln(state.alpha3) - gammaln(a).sum()) + np.sum((a - 1.0) * logz_sum)
    return lp + float(dirichlet_logpdf(pi, hyper.c_pi_vec(K)))


def pi_log_accept(state, hyper, pi_new):
    lt = pi_log_target(state, hyper, pi_new) - pi_log_target(state, hyper, state.pi)
    q_back = dirichlet_proposal_logpdf(state.pi, pi_new, hyper.a_pi)
    q_fwd = dirichlet_proposal_logpdf(pi_new, state.pi, hyper.a_pi)
    return float(lt + q_back - q_fwd)


def update_pi(state, hyper, rng, counters=None):
    K = state.pi.size
    if K == 1:
        return state
    prop = dirichlet_sample(rng, hyper.a_pi * state.pi)
    if np.all(prop > 0) and np.all(prop < 1):
        lr = pi_log_accept(state, hyper, prop)
    else:
        lr = -np.inf
    acc = _mh_accept(rng, lr)
    if acc:
        state.pi = prop
    _count(counters, "pi", acc)
    return state


def alpha3_log_target(state, hyper, alpha3, logz_sum=None):
    N = state.Z.shape[0]
    if logz_sum is None:
        logz_sum = _z_log_sums(state)
    a = alpha3 * state.pi
    return -hyper.b * alpha3 + N * (gammaln(alpha3) - gammaln(a).sum()) + np.sum((a - 1.0) * logz_sum)


def alpha3_log_accept(state, hyper, alpha3_new):
    sd = np.sqrt(hyper.sigma_alpha3)
    return float(
        alpha3_log_target(state, hyper, alpha3_new)
        - alpha3_log_target(state, hyper, state.alpha3)
        + truncnorm_logpdf(state.alpha3, alpha3_new, sd)
        - truncnorm_logpdf(alpha3_new, state.alpha3, sd)
    )


def update_alpha3(state, hyper, rng, counters=None):
    sd = np.sqrt(hyper.sigma_alpha3)
    prop = truncnorm_sample(rng, state.alpha3, sd)
    acc = _mh_accept(rng, alpha3_log_accept(state, hyper, prop))
    if acc:
        state.alpha3 = float(prop)
    _count(counters, "alpha3", acc)
    return state


# ------------------------------------------------------------------ sweep

def _count(counters, name, accepted, proposed=1):
    if counters is None:
        return
    acc, prop = counters.get(name, (0, 0))
    counters[name] = (acc + int(accepted), prop + int(proposed))


def sweep_steps(state: ParameterState, update_xi: bool = True) -> list:
    """The fixed scan as a list of (block, index) pairs.

    Order: phi, [xi], delta, a1/a2, gamma, [xi shrinkage], nu, eta, tau, Z,
    pi, alpha3, sigma2, chi.
    """
    d = state.dims
    K, M, R = d.K, d.M, d.R
    ext = state.ext is not None and update_xi and R > 0
    steps = [("phi", (j, m)) for j in range(K) for m in range(M)]
    if ext:
        steps += [("xi", (k, r, m)) for k in range(K) for r in range(R) for m in range(M)]
    steps += [("delta", (k, h)) for k in range(K) for h in range(M)]
    steps += [("a1", k) for k in range(K)] + [("a2", k) for k in range(K)]
    steps += [("gamma", None)]
    if ext:
        steps += [("shrink_xi", None)]
    steps += [("nu", j) for j in range(K)]
    steps += [("eta", (j, r)) for j in range(K) for r in range(R)]
    steps += [("tau", None), ("Z", None), ("pi", None), ("alpha3", None), ("sigma2", None)]
    steps += [("chi", m) for m in range(M)]
    return steps


def _run_step(state, data, hyper, rng, name, idx, beta, cache, counters):
    if name == "phi":
        update_phi(state, data, hyper, rng, idx[0], idx[1], beta, cache)
    elif name == "xi":
        update_xi(state, data, hyper, rng, idx[0], idx[1], idx[2], beta, cache)
    elif name == "delta":
        update_delta(state, hyper, rng, idx[0], idx[1])
    elif name == "a1":
        update_a1(state, hyper, rng, idx, counters)
    elif name == "a2":
        update_a2(state, hyper, rng, idx, counters)
    elif name == "gamma":
        update_gamma(state, hyper, rng)
    elif name == "shrink_xi":
        update_shrinkage_xi(state, hyper, rng, counters)
    elif name == "nu":
        update_nu(state, data, hyper, rng, idx, beta, cache)
    elif name == "eta":
        update_eta(state, data, hyper, rng, idx[0], idx[1], beta, cache)
    elif name == "tau":
        update_tau(state, data, hyper, rng)
    elif name == "Z":
        update_Z(state, data, hyper, rng, None, beta, cache, counters)
    elif name == "pi":
        update_pi(state, hyper, rng, counters)
    elif name == "alpha3":
        update_alpha3(state, hyper, rng, counters)
    elif name == "sigma2":
        update_sigma2(state, data, hyper, rng, beta)
    elif name == "chi":
        update_chi(state, data, rng, idx, beta, cache)
    else:  # pragma: no cover
        raise ValueError(name)


def sweep(state, data, hyper, rng, beta=1.0, reverse=False, counters=None, update_xi=True):
    """One fixed-scan pass over every block (reversed order when ``reverse``)."""
    steps = sweep_steps(state, update_xi)
    if reverse:
        steps = steps[::-1]
    cache = CoefCache(state, data)
    for name, idx in steps:
        _run_step(state, data, hyper, rng, name, idx, beta, cache, counters)
    return state


def tempered_log_ratio(betas, up_loglik, down_loglik) -> float:
    """Log acceptance ratio of a tempered transition.

    ``up_loglik[h]`` is the log-likelihood of the state entering level
    ``h + 1`` on the way up (h = 0..n-1); ``down_loglik[h]`` that of the state
    leaving level ``h + 1`` on the way down, so ``down_loglik[0]`` belongs to
    the final state.
    """
    betas = np.asarray(betas, dtype=float)
    n = betas.size - 1
    lr = 0.0
    for h in range(n):
        lr += (betas[h + 1] - betas[h]) * up_loglik[h]
    for h in range(n):
        lr += (betas[h] - betas[h + 1]) * down_loglik[h]
    return float(lr)


def tempered_transition(state, data, hyper, rng, betas, counters=None, update_xi=True, trace=None):
    """Tempered transition along ``betas`` (``betas[0]`` = 1).

    Returns ``(new_state, accepted, log_ratio)``. On rejection the returned
    state is an exact copy of the input.
    """
    betas = np.asarray(betas, dtype=float)
    n = betas.size - 1
    if n < 1 or betas[0] != 1.0:
        raise ConfigurationError("ladder must start at 1 and have at least two levels")
    start = state.copy()
    cur = state.copy()
    up = np.empty(n)
    down = np.empty(n)
    for h in range(1, n + 1):
        up[h - 1] = loglik_conditional(cur, data)
        sweep(cur, data, hyper, rng, beta=betas[h], update_xi=update_xi)
        if trace is not None:
            trace.append(cur.copy())
    for h in range(n, 0, -1):
        sweep(cur, data, hyper, rng, beta=betas[h], reverse=True, update_xi=update_xi)
        down[h - 1] = loglik_conditional(cur, data)
        if trace is not None:
            trace.append(cur.copy())
    lr = tempered_log_ratio(betas, up, down)
    accepted = bool(np.log(rng.random()) < lr)
    _count(counters, "tempered", accepted)
    return (cur if accepted else start), accepted, lr


# ----------------------------------------------------------- initialisation

def _project_simplex(V: np.ndarray) -> np.ndarray:
    """Euclidean projection of each row onto the probability simplex."""
    N, K = V.shape
    U = -np.sort(-V, axis=1)
    css = np.cumsum(U, axis=1) - 1.0
    ind = np.arange(1, K + 1)
    cond = U - css / ind > 0
    rho = K - 1 - np.argmax(cond[:, ::-1], axis=1)
    theta = css[np.arange(N), rho] / (rho + 1)
    return np.maximum(V - theta[:, None], 0.0)


def _design_weights(Z, X):
    # per-curve regression weights for [nu_1..nu_K, eta_{1,1}..eta_{K,R}]
    N, K = Z.shape
    W = [Z]
    if X.shape[1]:
        W.append((Z[:, :, None] * X[:, None, :]).reshape(N, -1))
    return np.concatenate(W, axis=1)


def _fit_mean(data, Z, ridge=1e-4):
    """Penalised least squares for (nu, eta) given Z, ignoring latent terms."""
    N, K = Z.shape
    R, P = data.R, data.P
    W = _design_weights(Z, data.X)  # N x J
    J = W.shape[1]
    A = np.einsum("ia,ib,ipq->apbq", W, W, data.G).reshape(J * P, J * P)
    A += ridge * np.kron(np.eye(J), rw_precision(P, 1e-3))
    rhs = np.einsum("ia,ip->ap", W, data.Sy).reshape(-1)
    theta = np.linalg.solve(A, rhs).reshape(J, P)
    nu = theta[:K]
    eta = theta[K:].reshape(K, R, P).transpose(0, 2, 1) if R else np.zeros((K, P, 0))
    return nu, eta


def _fit_alloc(data, nu, eta, Z, n_inner=30):
    """Projected-gradient steps for Z given the mean structure."""
    from .model import coef_mean

    tmp = ParameterState(
        nu=nu, eta=eta, phi=np.zeros((nu.shape[0], 1, nu.shape[1])), chi=np.zeros((data.N, 1)),
        Z=Z, pi=np.full(nu.shape[0], 1.0 / nu.shape[0]), alpha3=1.0, sigma2=1.0,
        delta=np.ones((nu.shape[0], 1)), a1=np.ones(nu.shape[0]), a2=np.ones(nu.shape[0]),
        gamma=np.ones((nu.shape[0], nu.shape[1], 1)), tau_nu=np.ones(nu.shape[0]),
        tau_eta=np.ones((nu.shape[0], eta.shape[2])),
    )
    Mi = coef_mean(tmp, data.X)  # N x K x P
    H = np.einsum("ikp,ipq,ilq->ikl", Mi, data.G, Mi)
    g = np.einsum("ikp,ip->ik", Mi, data.Sy)
    L = np.linalg.eigvalsh(H)[:, -1] + 1e-12
    for _ in range(n_inner):
        grad = np.einsum("ikl,il->ik", H, Z) - g
        Z = _project_simplex(Z - grad / L[:, None])
    return Z


def random_start(data, K, M, hyper, rng, covariance_adjusted=False, n_als=10) -> ParameterState:
    """One randomised starting point.

    Z starts from a flat Dirichlet draw and is refined by a few rounds of
    alternating least squares between (nu, eta) and the allocations; latent
    terms start small and random.
    """
    N, P, R = data.N, data.P, data.R
    Z = rng.dirichlet(np.ones(K), size=N) if K > 1 else np.ones((N, 1))
    nu, eta = _fit_mean(data, Z)
    if K > 1:
        for _ in range(n_als):
            Z = _fit_alloc(data, nu, eta, Z)
            nu, eta = _fit_mean(data, Z)
    Z = clamp_simplex(0.98 * Z + 0.02 / K) if K > 1 else Z
    state = ParameterState(
        nu=nu, eta=eta,
        phi=0.1 * rng.standard_normal((K, M, P)),
        chi=rng.standard_normal((N, M)),
        Z=Z, pi=np.full(K, 1.0 / K), alpha3=1.0, sigma2=1.0,
        delta=np.ones((K, M)), a1=np.full(K, 2.0), a2=np.full(K, 3.0),
        gamma=np.ones((K, P, M)), tau_nu=np.ones(K), tau_eta=np.ones((K, R)),
    )
    rss = residual_ss(state, data)
    state.sigma2 = max(rss / data.n_total, 1e-6)
    if covariance_adjusted:
        from .cov_ext import attach_xi

        attach_xi(state)
    return state


def run_starts(data, K, M, hyper, config: SamplerConfig, rng, covariance_adjusted=False):
    """All multi-start candidates as ``(log_posterior, state)`` pairs."""
    out = []
    for _ in range(config.n_starts):
        st = random_start(data, K, M, hyper, rng, covariance_adjusted)
        for _ in range(config.start_iters):
            sweep(st, data, hyper, rng)
        out.append((log_posterior(st, data, hyper), st))
    return out


def initialize(data, K, M, hyper, config: SamplerConfig, rng, covariance_adjusted=False) -> ParameterState:
    """Best of ``config.n_starts`` short runs by log posterior."""
    starts = run_starts(data, K, M, hyper, config, rng, covariance_adjusted)
    best = int(np.argmax([lp for lp, _ in starts]))
    return starts[best][1]


# ----------------------------------------------------------------- chain

BASE_FIELDS = ("nu", "eta", "phi", "chi", "Z", "sigma2", "pi", "alpha3")
SHRINK_FIELDS = ("delta", "a1", "a2", "gamma", "tau_nu", "tau_eta")
XI_FIELDS = ("xi",)
XI_SHRINK_FIELDS = ("delta_xi", "a1_xi", "a2_xi", "gamma_xi")


@dataclass
class ChainStore:
    """Post-burn-in, thinned draws in iteration-major arrays."""

    draws: dict
    log_post: np.ndarray
    acceptance: dict
    meta: dict

    @property
    def n_stored(self) -> int:
        return int(self.log_post.shape[0])

    @property
    def K(self) -> int:
        return int(self.meta["K"])

    def acceptance_rates(self) -> dict:
        return {k: (a / p if p else float("nan")) for k, (a, p) in self.acceptance.items()}

    def state_at(self, s: int) -> ParameterState:
        """Reconstruct a state from draw ``s``; unstored hyperparameters get placeholders."""
        d = self.draws
        K, M, P, R = (int(self.meta[k]) for k in ("K", "M", "P", "R"))

        def get(name, default):
            return np.array(d[name][s]) if name in d else default

        st = ParameterState(
            nu=get("nu", None), eta=get("eta", None), phi=get("phi", None), chi=get("chi", None),
            Z=get("Z", None), pi=get("pi", None), alpha3=float(d["alpha3"][s]), sigma2=float(d["sigma2"][s]),
            delta=get("delta", np.ones((K, M))), a1=get("a1", np.full(K, 2.0)), a2=get("a2", np.full(K, 3.0)),
            gamma=get("gamma", np.ones((K, P, M))), tau_nu=get("tau_nu", np.ones(K)),
            tau_eta=get("tau_eta", np.ones((K, R))),
        )
        if "xi" in d:
            from .cov_ext import XiBlock

            st.ext = XiBlock(
                xi=get("xi", None), delta_xi=get("delta_xi", np.ones((K, R, M))),
                a1_xi=get("a1_xi", np.full((K, R), 2.0)), a2_xi=get("a2_xi", np.full((K, R), 3.0)),
                gamma_xi=get("gamma_xi", np.ones((K, R, P, M))),
            )
        return st

    def subset(self, idx) -> "ChainStore":
        idx = np.asarray(idx)
        return ChainStore(
            draws={k: v[idx] for k, v in self.draws.items()},
            log_post=self.log_post[idx], acceptance=dict(self.acceptance), meta=dict(self.meta),
        )


def _snapshot(state, fields_):
    out = {}
    for f in fields_:
        if f in XI_FIELDS or f in XI_SHRINK_FIELDS:
            out[f] = np.array(getattr(state.ext, f), dtype=float)
        else:
            out[f] = np.array(getattr(state, f), dtype=float)
    return out


def chain_fields(covariance_adjusted: bool, store_shrinkage: bool) -> tuple:
    f = BASE_FIELDS
    if store_shrinkage:
        f = f + SHRINK_FIELDS
    if covariance_adjusted:
        f = f + XI_FIELDS + (XI_SHRINK_FIELDS if store_shrinkage else ())
    return f


def run_chain(data, K, M, hyper, config: SamplerConfig, covariance_adjusted=False, chain=0,
              init=None, callback=None) -> ChainStore:
    """Initialise, iterate and store a single chain.

    The RNG is ``numpy.random.default_rng(config.seed + chain)``.
    """
    rng = np.random.default_rng(int(config.seed) + int(chain))
    state = init.copy() if init is not None else initialize(data, K, M, hyper, config, rng, covariance_adjusted)
    if covariance_adjusted and state.ext is None:
        from .cov_ext import attach_xi

        attach_xi(state)
    fields_ = chain_fields(covariance_adjusted, config.store_shrinkage)
    n_store = (config.n_iter - config.burn_in) // config.thin
    store = {}
    log_post = np.empty(n_store)
    counters = {}
    temp = config.tempering
    betas = temperature_ladder(temp.n_temps, temp.beta_min) if temp.enabled else None
    s = 0
    for t in range(1, config.n_iter + 1):
        sweep(state, data, hyper, rng, counters=counters)
        if betas is not None and t % temp.interval == 0:
            state, _, _ = tempered_transition(state, data, hyper, rng, betas, counters)
        if t > config.burn_in and (t - config.burn_in) % config.thin == 0 and s < n_store:
            snap = _snapshot(state, fields_)
            for k, v in snap.items():
                if k not in store:
                    store[k] = np.empty((n_store,) + v.shape)
                store[k][s] = v
            log_post[s] = log_posterior(state, data, hyper)
            s += 1
        if callback is not None:
            callback(t, state)
    meta = {
        "K": K, "M": M, "P": data.P, "R": data.R, "N": data.N,
        "n_iter": config.n_iter, "burn_in": config.burn_in, "thin": config.thin,
        "seed": int(config.seed), "chain": int(chain), "covariance_adjusted": bool(covariance_adjusted),
        "basis_degree": data.basis.degree, "basis_domain": list(data.basis.domain),
    }
    return ChainStore(draws=store, log_post=log_post, acceptance=counters, meta=meta)
