"""Synthetic data generators and forward simulation from the model."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .basis import BasisSpec, build_basis, penalty_matrix
from .errors import ConfigurationError
from .model import FunctionalDataset, HyperParams, ParameterState, fitted_coef, rw_precision
from .sampler import clamp_simplex, dirichlet_sample

SCENARIOS = ("two_cov", "one_cov", "no_cov", "ic_study")

# (K, M, R) of the generating model
SCENARIO_DIMS = {
    "two_cov": (2, 3, 2),
    "one_cov": (2, 3, 1),
    "no_cov": (2, 2, 0),
    "ic_study": (3, 2, 1),
}

PHI_SCALES = (2.25, 1.0, 0.49)


@dataclass(frozen=True)
class ScenarioSpec:
    scenario: str
    N: int
    grid_size: int = 25
    P: int = 8
    seed: int = 0
    sigma2: float = 1.0

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ConfigurationError(f"unknown scenario {self.scenario!r}; choose from {SCENARIOS}")
        if self.N < 1 or self.grid_size < 1:
            raise ConfigurationError("N and grid_size must be positive")
        if self.P < 4:
            raise ConfigurationError("P must be at least 4 for cubic splines")
        if not self.sigma2 > 0:
            raise ConfigurationError("sigma2 must be positive")

    @property
    def dims(self):
        return SCENARIO_DIMS[self.scenario]

    def basis(self) -> BasisSpec:
        return BasisSpec(num_basis=self.P, degree=3, domain=(0.0, 1.0))

    def grid(self) -> np.ndarray:
        return np.linspace(0.0, 1.0, self.grid_size)


def rw_factor(P: int) -> np.ndarray:
    """``P x (P-1)`` matrix ``L`` with ``L L' = penalty_matrix(P)``."""
    w, V = np.linalg.eigh(penalty_matrix(P))
    keep = w > 1e-10 * w.max()
    return V[:, keep] * np.sqrt(w[keep])


def _ramp(P, start, step):
    return start + step * np.arange(P, dtype=float)


def mean_targets(scenario: str, P: int):
    """Means of the generating laws for (nu, eta)."""
    K, _, R = SCENARIO_DIMS[scenario]
    nu = [_ramp(P, 6.0, -2.0), _ramp(P, -8.0, 2.0)]
    if K == 3:
        # third feature: a symmetric hump, distinct from both ramps
        s = np.linspace(-1.0, 1.0, P)
        nu.append(6.0 - 12.0 * s**2)
    eta = np.zeros((K, P, R))
    if scenario == "two_cov":
        eta[:, :, 0] = 1.0
        eta[:, :, 1] = _ramp(P, 3.0, -1.0)
    elif scenario == "one_cov":
        eta[0, :, 0], eta[1, :, 0] = 2.0, -2.0
    elif scenario == "ic_study":
        eta[0, :, 0], eta[1, :, 0], eta[2, :, 0] = 2.0, -2.0, 1.0
    return np.array(nu), eta


def generate_allocations(rng, N: int, K: int):
    """Dirichlet-mixture allocations and the block label of every row."""
    if K == 2:
        probs = np.array([0.3, 0.3, 0.4])
        params = [np.array([10.0, 1.0]), np.array([1.0, 10.0]), np.array([1.0, 1.0])]
    elif K == 3:
        probs = np.array([0.2, 0.2, 0.2, 0.4])
        params = [np.array([30.0, 1, 1]), np.array([1, 30.0, 1]), np.array([1, 1, 30.0]), np.ones(3)]
    else:
        raise ConfigurationError("allocation mixture defined for K = 2 or 3")
    blocks = rng.choice(len(probs), size=N, p=probs)
    Z = np.empty((N, K))
    for b, a in enumerate(params):
        idx = np.flatnonzero(blocks == b)
        if idx.size:
            Z[idx] = rng.dirichlet(a, size=idx.size)
    return clamp_simplex(Z), blocks


def _placeholder_state(nu, eta, phi, chi, Z, sigma2):
    K, P = nu.shape
    M, R = phi.shape[1], eta.shape[2]
    return ParameterState(
        nu=nu, eta=eta, phi=phi, chi=chi, Z=Z, pi=np.full(K, 1.0 / K), alpha3=1.0, sigma2=float(sigma2),
        delta=np.ones((K, M)), a1=np.full(K, 2.0), a2=np.full(K, 3.0), gamma=np.ones((K, P, M)),
        tau_nu=np.ones(K), tau_eta=np.ones((K, R)),
    )


def generate(spec: ScenarioSpec):
    """Draw truth parameters and a dataset for ``spec``.

    Returns ``(dataset, truth)`` where ``truth`` is a ParameterState whose
    hyperparameter fields are placeholders.
    """
    rng = np.random.default_rng(spec.seed)
    K, M, R = spec.dims
    P, N = spec.P, spec.N
    L = rw_factor(P)
    nu_mean, eta_mean = mean_targets(spec.scenario, P)
    nu = nu_mean + 2.0 * rng.standard_normal((K, L.shape[1])) @ L.T
    eta = eta_mean.copy()
    for k in range(K):
        for r in range(R):
            eta[k, :, r] += L @ rng.standard_normal(L.shape[1])
    phi = np.stack([
        np.stack([np.sqrt(PHI_SCALES[m]) * rng.standard_normal(P) for m in range(M)]) for _ in range(K)
    ])
    chi = rng.standard_normal((N, M))
    Z, _ = generate_allocations(rng, N, K)
    if spec.scenario == "one_cov":
        X = 3.0 * rng.standard_normal((N, R))
    else:
        X = rng.standard_normal((N, R))
    truth = _placeholder_state(nu, eta, phi, chi, Z, spec.sigma2)
    grid = spec.grid()
    data = sample_from_model(truth, X, [grid] * N, rng, spec.basis())
    return data, truth


def sample_from_model(state: ParameterState, X, grids, rng, basis: BasisSpec, draw_chi: bool = False):
    """Simulate curves from the conditional likelihood.

    With ``draw_chi`` the latent scores are redrawn from N(0, 1) first, which
    samples from the integrated likelihood instead.
    """
    X = np.asarray(X, dtype=float).reshape(len(grids), -1)
    st = state
    if draw_chi:
        st = state.copy()
        st.chi = rng.standard_normal(state.chi.shape)
    c = fitted_coef(st, X)
    values = []
    sd = np.sqrt(state.sigma2)
    for i, t in enumerate(grids):
        S = build_basis(basis, t)
        values.append(S.T @ c[i] + sd * rng.standard_normal(len(t)))
    return FunctionalDataset(times=[np.asarray(t, float) for t in grids], values=values, X=X)


def noiseless_curves(state: ParameterState, X, grids, basis: BasisSpec) -> list:
    c = fitted_coef(state, np.asarray(X, float).reshape(len(grids), -1))
    return [build_basis(basis, t).T @ c[i] for i, t in enumerate(grids)]


def draw_from_prior(K, M, P, N, X, hyper: HyperParams, rng, covariance_adjusted=False) -> ParameterState:
    """Exact draw from the joint prior (requires ``hyper.rw_ridge > 0``)."""
    if hyper.rw_ridge <= 0:
        raise ConfigurationError("prior simulation needs a proper random-walk prior (rw_ridge > 0)")
    X = np.asarray(X, dtype=float).reshape(N, -1)
    R = X.shape[1]
    h = hyper
    a1 = rng.gamma(h.alpha1, 1.0 / h.beta1, K)
    a2 = rng.gamma(h.alpha2, 1.0 / h.beta2, K)
    delta = np.empty((K, M))
    delta[:, 0] = rng.gamma(a1)
    if M > 1:
        delta[:, 1:] = rng.gamma(np.repeat(a2[:, None], M - 1, axis=1))
    gamma = rng.gamma(0.5 * h.nu_gamma, 2.0 / h.nu_gamma, (K, P, M))
    tt = np.cumprod(delta, axis=1)
    phi = rng.standard_normal((K, M, P)) / np.sqrt(np.transpose(gamma, (0, 2, 1)) * tt[:, :, None])
    tau_nu = rng.gamma(h.alpha_nu, 1.0 / h.beta_nu, K)
    tau_eta = rng.gamma(h.alpha_eta, 1.0 / h.beta_eta, (K, R))
    Lq = np.linalg.cholesky(rw_precision(P, h.rw_ridge))

    def rw_draw(tau):
        e = rng.standard_normal(P)
        return np.linalg.solve(Lq.T, e) / np.sqrt(tau)

    nu = np.stack([rw_draw(tau_nu[k]) for k in range(K)])
    eta = np.zeros((K, P, R))
    for k in range(K):
        for r in range(R):
            eta[k, :, r] = rw_draw(tau_eta[k, r])
    c_pi = h.c_pi_vec(K)
    pi = clamp_simplex(rng.dirichlet(c_pi)[None, :])[0] if K > 1 else np.ones(1)
    alpha3 = rng.exponential(1.0 / h.b)
    if K > 1:
        Z = clamp_simplex(dirichlet_sample(rng, np.tile(alpha3 * pi, (N, 1))))
    else:
        Z = np.ones((N, 1))
    sigma2 = 1.0 / rng.gamma(h.alpha0, 1.0 / h.beta0)
    chi = rng.standard_normal((N, M))
    st = ParameterState(
        nu=nu, eta=eta, phi=phi, chi=chi, Z=Z, pi=pi, alpha3=float(alpha3), sigma2=float(sigma2),
        delta=delta, a1=a1, a2=a2, gamma=gamma, tau_nu=tau_nu, tau_eta=tau_eta,
    )
    if covariance_adjusted:
        from .cov_ext import XiBlock

        a1x = rng.gamma(h.alpha1, 1.0 / h.beta1, (K, R))
        a2x = rng.gamma(h.alpha2, 1.0 / h.beta2, (K, R))
        dx = np.empty((K, R, M))
        dx[:, :, 0] = rng.gamma(a1x)
        if M > 1:
            dx[:, :, 1:] = rng.gamma(np.repeat(a2x[:, :, None], M - 1, axis=2))
        gx = rng.gamma(0.5 * h.nu_gamma, 2.0 / h.nu_gamma, (K, R, P, M))
        ttx = np.cumprod(dx, axis=2)  # K x R x M
        xi = rng.standard_normal((K, M, P, R)) / np.sqrt(
            np.transpose(gx, (0, 3, 2, 1)) * np.transpose(ttx, (0, 2, 1))[:, :, None, :]
        )
        st.ext = XiBlock(xi=xi, delta_xi=dx, a1_xi=a1x, a2_xi=a2x, gamma_xi=gx)
    return st
