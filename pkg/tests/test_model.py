import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats
from scipy.special import gammaln

from cafmm.basis import BasisSpec, build_basis
from cafmm.errors import ShapeError, ValidationError
from cafmm.model import (
    FunctionalDataset,
    HyperParams,
    ModelData,
    dirichlet_logpdf,
    log_posterior,
    log_prior,
    loglik_conditional,
    loglik_integrated,
    loglik_integrated_obs,
    mean_curve,
    mixed_cov,
    pointwise_integrated_loglik,
)
from conftest import random_dataset, random_state
from oracles import (
    basis_column,
    log_prior_oracle,
    loglik_conditional_oracle,
    loglik_integrated_oracle,
)


def _basis_fn(P, lo=0.0, hi=1.0, d=3):
    return lambda t: basis_column(P, d, lo, hi, t)


# ------------------------------------------------------------------ mean_curve

def test_mean_curve_degree_zero_hand_example():
    rng = np.random.default_rng(0)
    st_ = random_state(rng, N=1, K=1, M=1, P=2, R=1)
    st_.nu[0] = [1.0, 2.0]
    st_.eta[0, :, 0] = [0.5, -0.5]
    S = build_basis(BasisSpec(num_basis=2, degree=0), [0.25, 0.75])
    np.testing.assert_allclose(mean_curve(st_, 0, [2.0], S), [2.0, 1.0], atol=1e-15)


def test_mean_curve_without_covariate_effect():
    rng = np.random.default_rng(1)
    st_ = random_state(rng, N=1, K=2, M=1, P=6, R=2)
    S = build_basis(BasisSpec(num_basis=6), np.linspace(0, 1, 11))
    np.testing.assert_allclose(mean_curve(st_, 1, [0.0, 0.0], S), S.T @ st_.nu[1], atol=1e-14)
    st_.eta[:] = 0
    np.testing.assert_allclose(mean_curve(st_, 0, [3.0, -7.0], S), S.T @ st_.nu[0], atol=1e-14)


def test_mean_curve_shape_errors():
    rng = np.random.default_rng(2)
    st_ = random_state(rng, N=1, K=1, M=1, P=5, R=2)
    S = build_basis(BasisSpec(num_basis=5), [0.1])
    with pytest.raises(ShapeError):
        mean_curve(st_, 0, [1.0], S)
    with pytest.raises(ShapeError):
        mean_curve(st_, 0, [1.0, 2.0], S[:4])


# ------------------------------------------------------------------ mixed_cov

def test_mixed_cov_scalar_case():
    rng = np.random.default_rng(3)
    st_ = random_state(rng, N=1, K=2, M=1, P=1, R=0)
    a, b, s, w = 1.3, -0.4, 0.7, 0.35
    st_.phi[:, 0, 0] = [a, b]
    V = mixed_cov(st_, [w, 1 - w], np.array([[s]]))
    assert V.shape == (1, 1)
    assert abs(V[0, 0] - s**2 * (w * a + (1 - w) * b) ** 2) < 1e-14


def test_mixed_cov_vertex_and_zero():
    rng = np.random.default_rng(4)
    st_ = random_state(rng, N=1, K=3, M=2, P=6, R=0)
    S = build_basis(BasisSpec(num_basis=6), np.linspace(0, 1, 9))
    V = mixed_cov(st_, [0.0, 1.0, 0.0], S)
    want = S.T @ sum(np.outer(st_.phi[1, m], st_.phi[1, m]) for m in range(2)) @ S
    np.testing.assert_allclose(V, want, atol=1e-12)
    st_.phi[:] = 0
    assert np.all(mixed_cov(st_, [0.2, 0.3, 0.5], S) == 0)


def test_mixed_cov_double_sum_oracle():
    rng = np.random.default_rng(5)
    st_ = random_state(rng, N=1, K=3, M=2, P=5, R=0)
    S = build_basis(BasisSpec(num_basis=5), rng.uniform(0, 1, 7))
    z = np.array([0.2, 0.5, 0.3])
    want = np.zeros((7, 7))
    for k, k2 in itertools.product(range(3), repeat=2):
        Sig = sum(np.outer(st_.phi[k, m], st_.phi[k2, m]) for m in range(2))
        want += z[k] * z[k2] * S.T @ Sig @ S
    np.testing.assert_allclose(mixed_cov(st_, z, S), want, atol=1e-12)


def test_mixed_cov_rejects_non_simplex():
    rng = np.random.default_rng(6)
    st_ = random_state(rng, N=1, K=2, M=1, P=4, R=0)
    S = build_basis(BasisSpec(num_basis=4), [0.5])
    with pytest.raises(ValidationError):
        mixed_cov(st_, [0.7, 0.7], S)
    with pytest.raises(ValidationError):
        mixed_cov(st_, [1.2, -0.2], S)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31), K=st.integers(1, 4), M=st.integers(1, 3))
def test_mixed_cov_symmetric_psd(seed, K, M):
    rng = np.random.default_rng(seed)
    st_ = random_state(rng, N=1, K=K, M=M, P=6, R=0)
    S = build_basis(BasisSpec(num_basis=6), np.sort(rng.uniform(0, 1, 12)))
    z = rng.dirichlet(np.ones(K))
    V = mixed_cov(st_, z / z.sum(), S)
    assert np.max(np.abs(V - V.T)) <= 1e-12
    ev = np.linalg.eigvalsh(V)
    assert ev.min() >= -1e-8 * max(ev.max(), 0.0) - 1e-300


# ------------------------------------------------------------------ likelihoods

def test_zero_residual_normaliser():
    rng = np.random.default_rng(7)
    ds = random_dataset(rng, N=4, R=1)
    data = ModelData(ds, BasisSpec(num_basis=5))
    st_ = random_state(rng, N=4, K=2, M=2, P=5, R=1)
    st_.sigma2 = 1.0
    from cafmm.model import fitted_coef

    c = fitted_coef(st_, ds.X)
    vals = [data.S[i].T @ c[i] for i in range(4)]
    data2 = ModelData(FunctionalDataset(ds.times, vals, ds.X), data.basis)
    n = data2.n_total
    assert abs(loglik_conditional(st_, data2) + 0.5 * n * math.log(2 * math.pi)) < 1e-10


def test_conditional_matches_oracle(small_problem):
    rng, data, _ = small_problem
    for ext in (False, True):
        st_ = random_state(rng, N=data.N, K=3, M=2, P=5, R=2, ext=ext)
        got = loglik_conditional(st_, data)
        want = loglik_conditional_oracle(st_, data.dataset, _basis_fn(5))
        assert abs(got - want) < 1e-9


def test_integrated_matches_oracle(small_problem):
    rng, data, _ = small_problem
    st_ = random_state(rng, N=data.N, K=3, M=2, P=5, R=2)
    want = loglik_integrated_oracle(st_, data.dataset, _basis_fn(5))
    assert abs(loglik_integrated(st_, data) - want) < 1e-9


def test_integrated_equals_conditional_when_phi_zero(small_problem):
    rng, data, _ = small_problem
    st_ = random_state(rng, N=data.N, K=2, M=2, P=5, R=2)
    st_.phi[:] = 0
    st_.chi[:] = 0
    assert abs(loglik_integrated(st_, data) - loglik_conditional(st_, data)) < 1e-9


def test_integrated_scalar_closed_form():
    rng = np.random.default_rng(8)
    ds = FunctionalDataset([np.array([0.3])], [np.array([1.7])], np.array([[0.4]]))
    basis = BasisSpec(num_basis=2, degree=0)
    data = ModelData(ds, basis)
    st_ = random_state(rng, N=1, K=2, M=1, P=2, R=1)
    z = st_.Z[0]
    s = 1.0  # first indicator at t=0.3
    mu = sum(z[k] * (st_.nu[k, 0] + st_.eta[k, 0, 0] * 0.4) for k in range(2))
    v = (s * (z @ st_.phi[:, 0, 0])) ** 2 + st_.sigma2
    want = stats.norm.logpdf(1.7, mu, math.sqrt(v))
    assert abs(loglik_integrated(st_, data) - want) < 1e-12


def test_k1_matches_random_effects_regression(small_problem):
    rng, data, _ = small_problem
    st_ = random_state(rng, N=data.N, K=1, M=2, P=5, R=2)
    total = 0.0
    for i in range(data.N):
        S = data.S[i]
        x = data.X[i]
        mu = S.T @ (st_.nu[0] + st_.eta[0] @ x + st_.chi[i] @ st_.phi[0])
        total += stats.multivariate_normal.logpdf(data.dataset.values[i], mu, st_.sigma2 * np.eye(S.shape[1]))
    assert abs(loglik_conditional(st_, data) - total) < 1e-9


def test_monte_carlo_marginalisation():
    rng = np.random.default_rng(9)
    ds = random_dataset(rng, N=2, R=1, n_range=(3, 3))
    data = ModelData(ds, BasisSpec(num_basis=4))
    st_ = random_state(rng, N=2, K=2, M=1, P=4, R=1)
    st_.sigma2 = 2.0
    target = loglik_integrated(st_, data)
    n_mc = 40000
    vals = np.empty(n_mc)
    for s in range(n_mc):
        st_.chi = rng.normal(size=(2, 1))
        vals[s] = loglik_conditional(st_, data)
    w = np.exp(vals - target)
    est, se = w.mean(), w.std(ddof=1) / math.sqrt(n_mc)
    assert abs(est - 1.0) < 3 * se + 1e-12


def test_pointwise_integrated_single_point_curves():
    rng = np.random.default_rng(10)
    ds = random_dataset(rng, N=5, R=1, n_range=(1, 1))
    data = ModelData(ds, BasisSpec(num_basis=5))
    st_ = random_state(rng, N=5, K=2, M=2, P=5, R=1)
    np.testing.assert_allclose(pointwise_integrated_loglik(st_, data), loglik_integrated_obs(st_, data), atol=1e-12)


def test_sigma2_must_be_positive(small_problem):
    rng, data, _ = small_problem
    st_ = random_state(rng, N=data.N, K=2, M=1, P=5, R=2)
    st_.sigma2 = 0.0
    with pytest.raises(ValidationError):
        loglik_conditional(st_, data)
    with pytest.raises(ValidationError):
        loglik_integrated(st_, data)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31), K=st.integers(2, 4))
def test_integrated_label_permutation_invariance(seed, K):
    rng = np.random.default_rng(seed)
    ds = random_dataset(rng, N=4, R=1)
    data = ModelData(ds, BasisSpec(num_basis=5))
    st_ = random_state(rng, N=4, K=K, M=2, P=5, R=1)
    perm = rng.permutation(K)
    st2 = st_.copy()
    st2.nu, st2.eta, st2.phi = st_.nu[perm], st_.eta[perm], st_.phi[perm]
    st2.Z = st_.Z[:, perm]
    a, b = loglik_integrated(st_, data), loglik_integrated(st2, data)
    assert abs(a - b) <= 1e-9 * max(1.0, abs(a))


# ------------------------------------------------------------------ prior

def test_log_prior_matches_oracle(small_problem):
    rng, data, hyper = small_problem
    for K, M in ((1, 1), (2, 3), (3, 2)):
        st_ = random_state(rng, N=data.N, K=K, M=M, P=5, R=2)
        assert abs(log_prior(st_, hyper, data.penalty) - log_prior_oracle(st_, hyper)) < 1e-10


def test_log_prior_oracle_with_other_hyperparameters(small_problem):
    rng, data, _ = small_problem
    hyper = HyperParams(alpha1=3.0, beta1=2.0, alpha2=4.0, beta2=1.5, nu_gamma=5.0, c_pi=2.5, b=0.7,
                        alpha0=2.0, beta0=3.0, alpha_nu=2.0, beta_nu=0.5, alpha_eta=1.5, beta_eta=2.0)
    st_ = random_state(rng, N=data.N, K=2, M=2, P=5, R=2)
    assert abs(log_prior(st_, hyper) - log_prior_oracle(st_, hyper)) < 1e-10


def test_random_walk_kernel_zero_for_constant_nu(small_problem):
    rng, data, hyper = small_problem
    st_ = random_state(rng, N=data.N, K=2, M=1, P=5, R=2)
    base = log_prior(st_, hyper)
    st_.nu[0] = 3.3
    st2 = st_.copy()
    st2.nu[0] = -1.0
    assert abs(log_prior(st_, hyper) - log_prior(st2, hyper)) < 1e-12
    assert base <= log_prior(st_, hyper) + 1e-12


@pytest.mark.parametrize("K", [2, 3, 5])
def test_uniform_dirichlet_density(K):
    z = np.full(K, 1.0 / K)
    assert abs(dirichlet_logpdf(z, np.ones(K)) - gammaln(K)) < 1e-13


def test_log_prior_rejects_invalid_state(small_problem):
    rng, data, hyper = small_problem
    st_ = random_state(rng, N=data.N, K=2, M=1, P=5, R=2)
    st_.Z[0] = [1.0, 0.0]
    with pytest.raises(ValidationError):
        log_prior(st_, hyper)
    st_ = random_state(rng, N=data.N, K=2, M=1, P=5, R=2)
    st_.delta[0, 0] = -1
    with pytest.raises(ValidationError):
        log_prior(st_, hyper)


def test_hyperparameter_validation():
    with pytest.raises(ValidationError):
        HyperParams(alpha2=1.0, beta2=2.0)
    with pytest.raises(ValidationError):
        HyperParams(b=0.0)
    with pytest.raises(ValidationError):
        HyperParams(c_pi=[1.0, -1.0])


def test_log_posterior_identity(small_problem):
    rng, data, hyper = small_problem
    st_ = random_state(rng, N=data.N, K=2, M=2, P=5, R=2, ext=True)
    lp = log_posterior(st_, data, hyper)
    assert lp - log_prior(st_, hyper) == pytest.approx(loglik_conditional(st_, data), abs=1e-9)
    assert log_posterior(st_, data, hyper, beta=0.3) == pytest.approx(
        log_prior(st_, hyper) + 0.3 * loglik_conditional(st_, data), abs=1e-9)


def test_better_fit_raises_log_posterior(small_problem):
    rng, data, hyper = small_problem
    st_ = random_state(rng, N=data.N, K=2, M=1, P=5, R=2)
    st_.sigma2 = 1.0
    from cafmm.model import fitted_coef

    c = fitted_coef(st_, data.X)
    vals = [data.S[i].T @ c[i] + 0.01 * rng.normal(size=data.lengths[i]) for i in range(data.N)]
    close = ModelData(FunctionalDataset(data.dataset.times, vals, data.X), data.basis)
    far_vals = [v + 1.0 for v in vals]
    far = ModelData(FunctionalDataset(data.dataset.times, far_vals, data.X), data.basis)
    assert log_posterior(st_, close, hyper) > log_posterior(st_, far, hyper)


def test_dataset_validation():
    with pytest.raises(ValidationError):
        FunctionalDataset([np.array([])], [np.array([])], np.zeros((1, 0)))
    with pytest.raises(ValidationError):
        FunctionalDataset([np.array([0.1, 0.2])], [np.array([1.0])], np.zeros((1, 0)))
    with pytest.raises(ValidationError):
        FunctionalDataset([np.array([0.1])], [np.array([1.0])], np.zeros((2, 1)))


def test_integrated_per_curve_sums_to_total(small_problem):
    rng, data, _ = small_problem
    st_ = random_state(rng, N=data.N, K=2, M=2, P=5, R=2)
    obs = loglik_integrated_obs(st_, data)
    assert obs.shape == (data.N,)
    assert abs(obs.sum() - loglik_integrated(st_, data)) < 1e-10
