"""Information criteria, predictive ordinates and posterior summaries of a stored chain."""

from __future__ import annotations

import itertools
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import logsumexp

from .basis import BasisSpec, build_basis
from .errors import ValidationError
from .model import ModelData, ParameterState, loglik_conditional, loglik_integrated_obs, pointwise_integrated_loglik
from .sampler import clamp_simplex

QUANTILES = (0.025, 0.5, 0.975)


def param_count_d(N: int, P: int, K: int, M: int, R: int) -> int:
    """Effective parameter count used by AIC and BIC."""
    for v in (N, P, K, M):
        if int(v) != v or v < 1:
            raise ValidationError("N, P, K, M must be positive integers")
    if int(R) != R or R < 0:
        raise ValidationError("R must be a non-negative integer")
    return int((N + P) * K + 2 * M * K * P + 4 * K + (N + K) * M + 2 + P * R * K + K * R)


def _require_draws(chain):
    if chain.n_stored < 1:
        raise ValidationError("chain has no stored draws")


def posterior_mean_state(chain) -> ParameterState:
    """Plug-in state from posterior means of the stored fields."""
    _require_draws(chain)
    st = chain.state_at(0)
    for name in ("nu", "eta", "phi", "chi", "pi"):
        setattr(st, name, chain.draws[name].mean(axis=0))
    st.Z = chain.draws["Z"].mean(axis=0)
    if st.Z.shape[1] > 1:
        st.Z = clamp_simplex(st.Z / st.Z.sum(axis=1, keepdims=True))
        st.pi = clamp_simplex((st.pi / st.pi.sum())[None, :])[0]
    st.sigma2 = float(chain.draws["sigma2"].mean())
    st.alpha3 = float(chain.draws["alpha3"].mean())
    if st.ext is not None and "xi" in chain.draws:
        st.ext.xi = chain.draws["xi"].mean(axis=0)
    return st


def information_criteria(chain, data: ModelData) -> dict:
    """AIC and BIC at the posterior mean (conditional likelihood)."""
    st = posterior_mean_state(chain)
    ll = loglik_conditional(st, data)
    d = param_count_d(data.N, data.P, chain.K, int(chain.meta["M"]), data.R)
    n = data.n_total
    return {
        "loglik": ll,
        "d": d,
        "n_total": n,
        "aic": -2.0 * ll + 2.0 * d,
        "bic": 2.0 * ll - d * np.log(n),
    }


def compute_bic(chain, data: ModelData) -> float:
    return information_criteria(chain, data)["bic"]


def compute_aic(chain, data: ModelData) -> float:
    return information_criteria(chain, data)["aic"]


def pointwise_loglik_draws(chain, data: ModelData) -> np.ndarray:
    """``S x n_total`` pointwise log densities with latent scores integrated out."""
    _require_draws(chain)
    return np.stack([pointwise_integrated_loglik(chain.state_at(s), data) for s in range(chain.n_stored)])


def dic_from_pointwise(L: np.ndarray) -> float:
    """DIC from pointwise log densities (rows: draws)."""
    L = np.asarray(L, dtype=float)
    S = L.shape[0]
    mean_ll = L.sum(axis=1).mean()
    log_fhat = np.sum(logsumexp(L, axis=0) - np.log(S))
    return float(-4.0 * mean_ll + 2.0 * log_fhat)


def compute_dic(chain, data: ModelData) -> float:
    return dic_from_pointwise(pointwise_loglik_draws(chain, data))


def curve_loglik_draws(chain, data: ModelData) -> np.ndarray:
    """``S x N`` per-curve integrated log densities."""
    _require_draws(chain)
    return np.stack([loglik_integrated_obs(chain.state_at(s), data) for s in range(chain.n_stored)])


def log_cpo_from_draws(L: np.ndarray) -> np.ndarray:
    """Harmonic-mean log CPO from ``S x N`` log densities."""
    L = np.asarray(L, dtype=float)
    S = L.shape[0]
    return -(logsumexp(-L, axis=0) - np.log(S))


def compute_cpo(chain, data: ModelData) -> np.ndarray:
    return np.exp(log_cpo_from_draws(curve_loglik_draws(chain, data)))


def compute_log_pml(log_cpo) -> float:
    return float(np.sum(log_cpo))


def rmise(f_true, f_hat, t=None, x=None) -> float:
    """Relative integrated squared error in percent.

    1-d arrays integrate over ``t``; 2-d arrays (``len(x) x len(t)``)
    integrate over both axes. Grids default to unit spacing.
    """
    f = np.asarray(f_true, dtype=float)
    g = np.asarray(f_hat, dtype=float)
    if f.shape != g.shape:
        raise ValidationError("true and estimated functions must share a grid")

    def integrate(v):
        if v.ndim == 1:
            return np.trapezoid(v, x=t)
        inner = np.trapezoid(v, x=t, axis=1)
        return np.trapezoid(inner, x=x)

    den = integrate(f**2)
    if not den > 0:
        raise ValidationError("true function has zero norm")
    return float(100.0 * integrate((f - g) ** 2) / den)


def rmse_alloc(Z_true, Z_hat) -> float:
    """Entrywise RMSE after the best column permutation of ``Z_hat``."""
    A = np.asarray(Z_true, dtype=float)
    B = np.asarray(Z_hat, dtype=float)
    if A.shape != B.shape:
        raise ValidationError("allocation matrices differ in shape")
    best = np.inf
    for perm in itertools.permutations(range(A.shape[1])):
        best = min(best, float(np.mean((A - B[:, list(perm)]) ** 2)))
    return float(np.sqrt(best))


def _basis_for(chain, basis: BasisSpec | None) -> BasisSpec:
    if basis is not None:
        return basis
    m = chain.meta
    return BasisSpec(num_basis=int(m["P"]), degree=int(m["basis_degree"]), domain=tuple(m["basis_domain"]))


def feature_mean_draws(chain, basis, grid, k: int, x) -> np.ndarray:
    """``S x n`` draws of the feature-``k`` mean at covariate ``x``."""
    B = build_basis(_basis_for(chain, basis), grid)
    x = np.atleast_1d(np.asarray(x, dtype=float))
    coef = chain.draws["nu"][:, k]
    if x.size:
        coef = coef + np.einsum("spr,r->sp", chain.draws["eta"][:, k], x)
    return coef @ B


def feature_surface_draws(chain, basis, grid, k: int, x_grid, d: int = 0) -> np.ndarray:
    """``S x len(x_grid) x n`` draws of the mean surface over covariate ``d``."""
    B = build_basis(_basis_for(chain, basis), grid)
    nu = chain.draws["nu"][:, k]  # S x P
    eta = chain.draws["eta"][:, k, :, d]  # S x P
    coef = nu[:, None, :] + np.asarray(x_grid)[None, :, None] * eta[:, None, :]
    return coef @ B


def posterior_summary(chain, basis, grid, covariate_values=None, quantiles=QUANTILES) -> dict:
    """Pointwise quantiles of every feature mean at each covariate vector."""
    _require_draws(chain)
    R = int(chain.meta["R"])
    if covariate_values is None:
        covariate_values = [np.zeros(R)]
    out = {"grid": np.asarray(grid, float).tolist(), "quantiles": list(quantiles), "features": []}
    for k in range(chain.K):
        per_x = []
        for x in covariate_values:
            x = np.atleast_1d(np.asarray(x, dtype=float))
            if x.size != R:
                raise ValidationError(f"covariate vector has length {x.size}, expected {R}")
            q = np.quantile(feature_mean_draws(chain, basis, grid, k, x), quantiles, axis=0, method="linear")
            per_x.append({"x": x.tolist(), "lower": q[0].tolist(), "median": q[1].tolist(), "upper": q[2].tolist()})
        out["features"].append(per_x)
    return out


def trapezoid_weights(grid) -> np.ndarray:
    t = np.asarray(grid, dtype=float)
    w = np.zeros_like(t)
    dt = np.diff(t)
    w[:-1] += dt / 2
    w[1:] += dt / 2
    return w


def covariance_surface_draws(chain, basis, grid, k: int, k2: int | None = None) -> np.ndarray:
    """``S x n x n`` draws of the (cross-)covariance surface of features ``k`` and ``k2``."""
    k2 = k if k2 is None else k2
    B = build_basis(_basis_for(chain, basis), grid)
    phi = chain.draws["phi"]
    Sig = np.einsum("smp,smq->spq", phi[:, k], phi[:, k2])
    return np.einsum("pa,spq,qb->sab", B, Sig, B)


def covariance_eigen(chain, basis, grid, k: int, n_components: int | None = None, quantiles=QUANTILES) -> dict:
    """Eigen-analysis of the feature-``k`` covariance operator per draw.

    The surface is discretised with trapezoid weights ``W`` and the symmetric
    matrix ``W^1/2 C W^1/2`` is diagonalised; eigenfunctions are scaled to unit
    L2 norm and sign-aligned with the first draw.
    """
    _require_draws(chain)
    C = covariance_surface_draws(chain, basis, grid, k)
    w = trapezoid_weights(grid)
    sw = np.sqrt(w)
    A = sw[None, :, None] * C * sw[None, None, :]
    A = 0.5 * (A + np.swapaxes(A, 1, 2))
    vals, vecs = np.linalg.eigh(A)
    vals = vals[:, ::-1]
    vecs = vecs[:, :, ::-1]
    nc = int(chain.meta["M"]) if n_components is None else n_components
    vals = vals[:, :nc]
    with np.errstate(divide="ignore", invalid="ignore"):
        funcs = np.where(sw[None, :, None] > 0, vecs[:, :, :nc] / sw[None, :, None], 0.0)
    ref = funcs[0]
    sign = np.sign(np.einsum("snc,nc,n->sc", funcs, ref, w))
    sign[sign == 0] = 1.0
    funcs = funcs * sign[:, None, :]
    return {
        "eigenvalues": vals,
        "eigenfunctions": np.transpose(funcs, (0, 2, 1)),
        "eigenvalue_quantiles": np.quantile(vals, quantiles, axis=0, method="linear"),
        "eigenfunction_quantiles": np.quantile(np.transpose(funcs, (0, 2, 1)), quantiles, axis=0, method="linear"),
    }


@dataclass
class FitReport:
    aic: float
    bic: float
    dic: float | None
    log_pml: float | None
    cpo: list | None
    log_cpo: list | None
    param_count: int
    loglik_at_mean: float
    n_total: int
    allocation_mean: list
    mean_summaries: dict
    eigen_summaries: list | None
    identifiability: dict | None
    acceptance: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def build_report(chain, data: ModelData, covariate_values=None, grid=None, dic=True, cpo=True,
                 eigen=True, identifiability=True) -> FitReport:
    """Assemble every diagnostic for a (post-processed) chain."""
    _require_draws(chain)
    ic = information_criteria(chain, data)
    grid = np.linspace(*data.basis.domain, 50) if grid is None else np.asarray(grid, float)
    dic_v = compute_dic(chain, data) if dic else None
    if cpo:
        lc = log_cpo_from_draws(curve_loglik_draws(chain, data))
        cpo_v, lcpo, lpml = np.exp(lc).tolist(), lc.tolist(), compute_log_pml(lc)
    else:
        cpo_v = lcpo = lpml = None
    eig = None
    if eigen:
        eig = []
        for k in range(chain.K):
            e = covariance_eigen(chain, data.basis, grid, k)
            eig.append({
                "eigenvalue_quantiles": e["eigenvalue_quantiles"].tolist(),
                "eigenfunction_median": e["eigenfunction_quantiles"][1].tolist(),
            })
    ident = None
    if identifiability:
        from .identifiability import check_assumptions

        Zbar = chain.draws["Z"].mean(axis=0)
        ident = check_assumptions(data.X, Zbar, data.lengths, data.P).to_dict()
    rates = {k: float(v) for k, v in sorted(chain.acceptance_rates().items())}
    return FitReport(
        aic=ic["aic"], bic=ic["bic"], dic=dic_v, log_pml=lpml, cpo=cpo_v, log_cpo=lcpo,
        param_count=ic["d"], loglik_at_mean=ic["loglik"], n_total=ic["n_total"],
        allocation_mean=chain.draws["Z"].mean(axis=0).tolist(),
        mean_summaries=posterior_summary(chain, data.basis, grid, covariate_values),
        eigen_summaries=eig, identifiability=ident, acceptance=rates,
    )
