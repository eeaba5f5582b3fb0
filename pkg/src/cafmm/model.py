"""Parameter containers, likelihoods and the joint prior of the mixed membership model.

Notation follows the usual conventions for this model class: ``nu`` (K x P)
are feature mean coefficients, ``eta`` (K x P x R) covariate effects,
``phi`` (K x M x P) pseudo-eigenfunction coefficients, ``chi`` (N x M) latent
scores and ``Z`` (N x K) allocation weights.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field, fields

import numpy as np
from scipy.special import gammaln

from .basis import BasisSpec, build_basis, penalty_matrix
from .errors import LinAlgFailure, ShapeError, ValidationError

LOG2PI = float(np.log(2.0 * np.pi))


@dataclass
class FunctionalDataset:
    """Irregularly sampled curves with a scalar covariate design.

    ``times[i]`` and ``values[i]`` hold curve ``i``; ``X`` is ``N x R``.
    """

    times: list
    values: list
    X: np.ndarray
    ids: list | None = None

    def __post_init__(self):
        self.times = [np.asarray(t, dtype=float).ravel() for t in self.times]
        self.values = [np.asarray(y, dtype=float).ravel() for y in self.values]
        X = np.asarray(self.X, dtype=float)
        if X.ndim == 1 and X.size == 0:
            X = X.reshape(len(self.times), 0)
        if X.ndim != 2:
            raise ShapeError("X must be a 2-d array")
        self.X = X
        if len(self.times) != len(self.values) or X.shape[0] != len(self.times):
            raise ShapeError("times, values and X must describe the same curves")
        for i, (t, y) in enumerate(zip(self.times, self.values)):
            if t.size == 0:
                raise ValidationError(f"curve {i} is empty")
            if t.shape != y.shape:
                raise ShapeError(f"curve {i}: times and values differ in length")
        if self.ids is None:
            self.ids = [str(i) for i in range(len(self.times))]

    @property
    def N(self) -> int:
        return len(self.times)

    @property
    def R(self) -> int:
        return self.X.shape[1]

    @property
    def lengths(self) -> np.ndarray:
        return np.array([t.size for t in self.times])

    @property
    def n_total(self) -> int:
        return int(sum(t.size for t in self.times))


@dataclass(frozen=True)
class ModelDims:
    K: int
    P: int
    M: int
    R: int
    N: int

    def __post_init__(self):
        for name in ("K", "P", "M", "N"):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be >= 1")
        if self.R < 0:
            raise ValidationError("R must be >= 0")


@dataclass
class HyperParams:
    """Prior hyperparameters and fixed proposal scales.

    ``rw_ridge`` adds ``rw_ridge * I`` to the random-walk precision, turning
    the otherwise improper smoothing prior into a proper one (used for
    prior simulation). ``c_pi`` may be a scalar or a length-K vector.
    """

    alpha1: float = 2.0
    beta1: float = 1.0
    alpha2: float = 2.0
    beta2: float = 0.5
    nu_gamma: float = 3.0
    alpha_nu: float = 1.0
    beta_nu: float = 1.0
    alpha_eta: float = 1.0
    beta_eta: float = 1.0
    c_pi: object = 1.0
    b: float = 1.0
    alpha0: float = 1.0
    beta0: float = 1.0
    eps1: float = 0.5
    eps2: float = 0.5
    a_z: float = 100.0
    a_pi: float = 100.0
    sigma_alpha3: float = 0.25
    rw_ridge: float = 0.0

    def __post_init__(self):
        for f in fields(self):
            if f.name == "c_pi":
                continue
            v = getattr(self, f.name)
            if not np.isfinite(v) or (v <= 0 and f.name != "rw_ridge") or v < 0:
                raise ValidationError(f"hyperparameter {f.name} must be positive, got {v}")
        if not self.alpha2 > self.beta2:
            raise ValidationError("alpha2 must exceed beta2")
        c = np.asarray(self.c_pi, dtype=float)
        if np.any(c <= 0) or not np.all(np.isfinite(c)):
            raise ValidationError("c_pi must be positive")

    def c_pi_vec(self, K: int) -> np.ndarray:
        c = np.asarray(self.c_pi, dtype=float)
        if c.ndim == 0:
            return np.full(K, float(c))
        if c.shape != (K,):
            raise ShapeError(f"c_pi has length {c.size}, expected {K}")
        return c

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = np.asarray(v).tolist() if f.name == "c_pi" else float(v)
        return out


@dataclass
class ParameterState:
    nu: np.ndarray
    eta: np.ndarray
    phi: np.ndarray
    chi: np.ndarray
    Z: np.ndarray
    pi: np.ndarray
    alpha3: float
    sigma2: float
    delta: np.ndarray
    a1: np.ndarray
    a2: np.ndarray
    gamma: np.ndarray
    tau_nu: np.ndarray
    tau_eta: np.ndarray
    ext: object = None  # XiBlock when the covariance depends on covariates

    @property
    def dims(self) -> ModelDims:
        K, P = self.nu.shape
        return ModelDims(K=K, P=P, M=self.phi.shape[1], R=self.eta.shape[2], N=self.Z.shape[0])

    def copy(self) -> "ParameterState":
        return copy.deepcopy(self)

    def tilde_tau(self) -> np.ndarray:
        """Cumulative shrinkage products, shape K x M."""
        return np.cumprod(self.delta, axis=1)

    def validate(self, strict_interior: bool = True) -> None:
        d = self.dims
        K, P, M, R, N = d.K, d.P, d.M, d.R, d.N
        shapes = {
            "eta": (K, P, R), "phi": (K, M, P), "chi": (N, M), "Z": (N, K), "pi": (K,),
            "delta": (K, M), "a1": (K,), "a2": (K,), "gamma": (K, P, M),
            "tau_nu": (K,), "tau_eta": (K, R),
        }
        for name, shp in shapes.items():
            if np.shape(getattr(self, name)) != shp:
                raise ShapeError(f"{name} has shape {np.shape(getattr(self, name))}, expected {shp}")
        _check_simplex(self.Z, "Z", strict_interior)
        _check_simplex(self.pi[None, :], "pi", strict_interior)
        for name in ("delta", "a1", "a2", "gamma", "tau_nu", "tau_eta"):
            v = getattr(self, name)
            if np.any(~(v > 0)):
                raise ValidationError(f"{name} must be strictly positive")
        if not self.sigma2 > 0:
            raise ValidationError("sigma2 must be positive")
        if not self.alpha3 > 0:
            raise ValidationError("alpha3 must be positive")
        if self.ext is not None:
            self.ext.validate(K, M, P, R)


def _check_simplex(Z, name, strict):
    Z = np.asarray(Z)
    if np.any(~np.isfinite(Z)):
        raise ValidationError(f"{name} has non-finite entries")
    if strict and (np.any(Z <= 0) or np.any(Z >= 1)) and Z.shape[-1] > 1:
        raise ValidationError(f"{name} rows must lie in the open simplex")
    if np.any(Z < 0):
        raise ValidationError(f"{name} has negative entries")
    if np.any(np.abs(Z.sum(axis=-1) - 1.0) > 1e-12 * max(1, Z.shape[-1])):
        raise ValidationError(f"{name} rows must sum to one")


class ModelData:
    """A dataset bound to a basis, with per-curve sufficient statistics.

    Attributes
    ----------
    S : list of arrays
        Per-curve basis matrices (P x n_i).
    B_long : (n_total, P) array
        Stacked basis rows for every observed point.
    G, Sy, yy : arrays
        ``S_i S_i'``, ``S_i y_i`` and ``y_i' y_i`` for each curve.
    """

    def __init__(self, dataset: FunctionalDataset, basis: BasisSpec):
        self.dataset = dataset
        self.basis = basis
        self.X = dataset.X
        self.N = dataset.N
        self.R = dataset.R
        self.P = basis.num_basis
        self.S = [build_basis(basis, t) for t in dataset.times]
        self.B_long = np.concatenate([s.T for s in self.S], axis=0)
        self.y_long = np.concatenate(dataset.values)
        self.lengths = dataset.lengths
        self.obs_index = np.repeat(np.arange(self.N), self.lengths)
        self.n_total = int(self.lengths.sum())
        self.G = np.stack([s @ s.T for s in self.S])
        self.Sy = np.stack([s @ y for s, y in zip(self.S, dataset.values)])
        self.yy = np.array([y @ y for y in dataset.values])
        self.penalty = penalty_matrix(self.P) if self.P >= 2 else np.zeros((1, 1))

    def dims(self, K: int, M: int) -> ModelDims:
        return ModelDims(K=K, P=self.P, M=M, R=self.R, N=self.N)


# ---------------------------------------------------------------- structure

def coef_mean(state: ParameterState, X: np.ndarray) -> np.ndarray:
    """Per-observation feature mean coefficients ``nu_k + eta_k x_i`` (N x K x P)."""
    out = np.broadcast_to(state.nu[None], (X.shape[0],) + state.nu.shape)
    if X.shape[1]:
        out = out + np.einsum("kpr,ir->ikp", state.eta, X)
    return out


def loadings(state: ParameterState, X: np.ndarray) -> np.ndarray:
    """Per-observation loadings ``phi_km (+ xi_km x_i)`` (N x K x M x P)."""
    L = np.broadcast_to(state.phi[None], (X.shape[0],) + state.phi.shape)
    if state.ext is not None and X.shape[1]:
        L = L + np.einsum("kmpr,ir->ikmp", state.ext.xi, X)
    return L


def feature_coef(state: ParameterState, X: np.ndarray) -> np.ndarray:
    """Feature-specific coefficients including latent scores (N x K x P)."""
    return coef_mean(state, X) + np.einsum("im,ikmp->ikp", state.chi, loadings(state, X))


def fitted_coef(state: ParameterState, X: np.ndarray) -> np.ndarray:
    """Basis coefficients of the conditional mean of each curve (N x P)."""
    return np.einsum("ik,ikp->ip", state.Z, feature_coef(state, X))


def mean_curve(state: ParameterState, k: int, x, S: np.ndarray) -> np.ndarray:
    """Mean of feature ``k`` at covariate ``x`` evaluated on the columns of ``S``."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    K, P, R = state.eta.shape
    if x.shape != (R,):
        raise ShapeError(f"covariate vector has length {x.size}, expected {R}")
    if S.shape[0] != P:
        raise ShapeError("basis matrix row count differs from P")
    coef = state.nu[k] + state.eta[k] @ x
    return S.T @ coef


def mixed_cov(state: ParameterState, z, S: np.ndarray, x=None) -> np.ndarray:
    """Latent covariance ``V`` of a curve with allocation ``z`` on the columns of ``S``."""
    z = np.asarray(z, dtype=float)
    _check_simplex(z[None, :], "z", strict=False)
    L = state.phi
    if state.ext is not None and x is not None:
        L = L + np.einsum("kmpr,r->kmp", state.ext.xi, np.atleast_1d(x))
    A = np.einsum("k,kmp->mp", z, L)  # M x P
    U = S.T @ A.T  # n x M
    V = U @ U.T
    return 0.5 * (V + V.T)


# -------------------------------------------------------------- likelihoods

def loglik_conditional(state: ParameterState, data: ModelData) -> float:
    """Gaussian log-likelihood given latent scores, summed over all points."""
    if not state.sigma2 > 0:
        raise ValidationError("sigma2 must be positive")
    c = fitted_coef(state, data.X)
    mu = np.einsum("lp,lp->l", data.B_long, c[data.obs_index])
    resid = data.y_long - mu
    n = data.n_total
    return float(-0.5 * n * (LOG2PI + np.log(state.sigma2)) - 0.5 * resid @ resid / state.sigma2)


def _cholesky_retry(A: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.cholesky(A)
    except np.linalg.LinAlgError:
        pass
    n = A.shape[-1]
    jitter = 1e-10 * np.trace(A) / n
    try:
        return np.linalg.cholesky(A + jitter * np.eye(n))
    except np.linalg.LinAlgError as exc:
        raise LinAlgFailure("covariance not positive definite after jitter") from exc


def _batched_cholesky(A: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.cholesky(A)
    except np.linalg.LinAlgError:
        return np.stack([_cholesky_retry(a) for a in A])


def _integrated_parts(state: ParameterState, data: ModelData):
    mcoef = np.einsum("ik,ikp->ip", state.Z, coef_mean(state, data.X))
    A = np.einsum("ik,ikmp->imp", state.Z, loadings(state, data.X))  # N x M x P
    return mcoef, A


def loglik_integrated_obs(state: ParameterState, data: ModelData) -> np.ndarray:
    """Per-curve log-density with latent scores integrated out (length N)."""
    if not state.sigma2 > 0:
        raise ValidationError("sigma2 must be positive")
    mcoef, A = _integrated_parts(state, data)
    out = np.empty(data.N)
    lengths = data.lengths
    for n in np.unique(lengths):
        ids = np.flatnonzero(lengths == n)
        S = np.stack([data.S[i] for i in ids])  # b x P x n
        y = np.stack([data.dataset.values[i] for i in ids])
        mu = np.einsum("bpn,bp->bn", S, mcoef[ids])
        U = np.einsum("bpn,bmp->bnm", S, A[ids])
        C = U @ np.swapaxes(U, 1, 2) + state.sigma2 * np.eye(n)
        Lc = _batched_cholesky(C)
        r = y - mu
        w = np.linalg.solve(Lc, r[..., None])[..., 0]
        logdet = 2.0 * np.log(np.diagonal(Lc, axis1=1, axis2=2)).sum(axis=1)
        out[ids] = -0.5 * (n * LOG2PI + logdet + np.sum(w * w, axis=1))
    return out


def loglik_integrated(state: ParameterState, data: ModelData) -> float:
    return float(loglik_integrated_obs(state, data).sum())


def pointwise_integrated_loglik(state: ParameterState, data: ModelData) -> np.ndarray:
    """Log marginal density of each observed point given allocations (length n_total)."""
    mcoef, A = _integrated_parts(state, data)
    B = data.B_long
    idx = data.obs_index
    mu = np.einsum("lp,lp->l", B, mcoef[idx])
    u = np.einsum("lp,lmp->lm", B, A[idx])
    var = np.sum(u * u, axis=1) + state.sigma2
    r = data.y_long - mu
    return -0.5 * (LOG2PI + np.log(var) + r * r / var)


# -------------------------------------------------------------------- prior

def _gamma_logpdf(x, shape, rate):
    return shape * np.log(rate) - gammaln(shape) + (shape - 1.0) * np.log(x) - rate * x


def dirichlet_logpdf(x: np.ndarray, alpha: np.ndarray) -> np.ndarray:
    """Row-wise Dirichlet log-density (Lebesgue measure on the first K-1 coordinates)."""
    x = np.asarray(x, dtype=float)
    alpha = np.asarray(alpha, dtype=float)
    return (
        gammaln(alpha.sum(axis=-1))
        - gammaln(alpha).sum(axis=-1)
        + np.sum((alpha - 1.0) * np.log(x), axis=-1)
    )


def shrinkage_logprior(coef, gamma, delta, a1, a2, nu_gamma, alpha1, beta1, alpha2, beta2):
    """Log prior of a multiplicative-gamma-process block.

    ``coef`` and ``gamma`` are ``G x P x M``; ``delta`` is ``G x M`` and
    ``a1``/``a2`` have length ``G`` (one group per feature, or per feature
    and covariate).
    """
    tt = np.cumprod(delta, axis=1)  # G x M
    prec = gamma * tt[:, None, :]
    lp = 0.5 * np.sum(np.log(prec)) - 0.5 * coef.size * LOG2PI - 0.5 * np.sum(prec * coef**2)
    half = 0.5 * nu_gamma
    lp += np.sum(_gamma_logpdf(gamma, half, half))
    lp += np.sum(_gamma_logpdf(delta[:, 0], a1, 1.0))
    if delta.shape[1] > 1:
        lp += np.sum(_gamma_logpdf(delta[:, 1:], a2[:, None], 1.0))
    lp += np.sum(_gamma_logpdf(a1, alpha1, beta1))
    lp += np.sum(_gamma_logpdf(a2, alpha2, beta2))
    return float(lp)


def rw_precision(P: int, ridge: float) -> np.ndarray:
    return penalty_matrix(P) + ridge * np.eye(P) if P >= 2 else ridge * np.eye(P)


def log_prior(state: ParameterState, hyper: HyperParams, penalty: np.ndarray | None = None) -> float:
    """Sum of every prior log-density in the hierarchy.

    The random-walk kernels keep their ``tau``-dependent normaliser
    ``(P/2) log tau`` but omit constants, so the value is defined up to an
    additive constant when ``rw_ridge`` is zero.
    """
    state.validate()
    d = state.dims
    K, P, R = d.K, d.P, d.R
    h = hyper
    Q = rw_precision(P, h.rw_ridge) if penalty is None else penalty + h.rw_ridge * np.eye(P)
    lp = shrinkage_logprior(
        np.transpose(state.phi, (0, 2, 1)), state.gamma, state.delta, state.a1, state.a2,
        h.nu_gamma, h.alpha1, h.beta1, h.alpha2, h.beta2,
    )
    qn = np.einsum("kp,pq,kq->k", state.nu, Q, state.nu)
    lp += np.sum(0.5 * P * np.log(state.tau_nu) - 0.5 * state.tau_nu * qn)
    lp += np.sum(_gamma_logpdf(state.tau_nu, h.alpha_nu, h.beta_nu))
    if R:
        qe = np.einsum("kpr,pq,kqr->kr", state.eta, Q, state.eta)
        lp += np.sum(0.5 * P * np.log(state.tau_eta) - 0.5 * state.tau_eta * qe)
        lp += np.sum(_gamma_logpdf(state.tau_eta, h.alpha_eta, h.beta_eta))
    lp += -0.5 * state.chi.size * LOG2PI - 0.5 * np.sum(state.chi**2)
    lp += np.sum(dirichlet_logpdf(state.Z, state.alpha3 * state.pi))
    lp += float(dirichlet_logpdf(state.pi, h.c_pi_vec(K)))
    lp += np.log(h.b) - h.b * state.alpha3
    lp += h.alpha0 * np.log(h.beta0) - gammaln(h.alpha0) - (h.alpha0 + 1) * np.log(state.sigma2) - h.beta0 / state.sigma2
    if state.ext is not None:
        lp += state.ext.log_prior(h)
    return float(lp)


def log_posterior(state: ParameterState, data: ModelData, hyper: HyperParams, beta: float = 1.0) -> float:
    """``log_prior + beta * loglik_conditional`` (``beta`` tempers the likelihood)."""
    return log_prior(state, hyper, data.penalty) + beta * loglik_conditional(state, data)
