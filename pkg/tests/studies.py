"""Scaled-down simulation studies used by the acceptance suite."""

import numpy as np

from cafmm import sampler as smp
from cafmm.basis import build_basis
from cafmm.diagnostics import feature_surface_draws, information_criteria, rmise, rmse_alloc
from cafmm.identifiability import best_permutation, relabel_chain, rescale_separability, rescale_state_arrays, separability_map
from cafmm.model import FunctionalDataset, HyperParams, ModelData
from cafmm.simulation import ScenarioSpec, generate

N_ITER = 20000
T_GRID = np.linspace(0.0, 1.0, 101)
# covariate range of the one_cov generator, about +-1.7 sd of N(0, 9)
X_GRID = np.linspace(-5.0, 5.0, 21)


def study_config(seed, n_iter=N_ITER):
    return smp.SamplerConfig(
        n_iter=n_iter, burn_in=n_iter // 2, thin=10, seed=seed, n_starts=5, start_iters=50,
        tempering={"enabled": True, "n_temps": 5, "beta_min": 0.3, "interval": 100},
    )


def canonical_truth(truth):
    """Truth arrays after the same separability map applied to fitted K = 2 chains."""
    arr = {"Z": truth.Z.copy(), "nu": truth.nu.copy(), "eta": truth.eta.copy(), "phi": truth.phi.copy()}
    z = arr["Z"][:, 0]
    rescale_state_arrays(arr, separability_map(arr["Z"]), float(z.min()), float(z.max()))
    return arr


def mean_structure_rmise(chain, truth_arr, basis):
    """Average over features of the R-MISE of the posterior-median surface ``nu_k + eta_k x``.

    A covariate-free chain estimates a surface that is constant in ``x``.
    """
    perm = best_permutation(chain.draws["Z"].mean(axis=0), truth_arr["Z"])
    truth_chain = smp.ChainStore(draws={"nu": truth_arr["nu"][None], "eta": truth_arr["eta"][None]},
                                 log_post=np.zeros(1), acceptance={}, meta={"K": truth_arr["nu"].shape[0]})
    out = []
    for k, k_hat in enumerate(perm):
        f = feature_surface_draws(truth_chain, basis, T_GRID, k, X_GRID)[0]
        if chain.draws["eta"].shape[3]:
            g = np.median(feature_surface_draws(chain, basis, T_GRID, k_hat, X_GRID), axis=0)
        else:
            g = np.broadcast_to(np.median(chain.draws["nu"][:, k_hat] @ build_basis(basis, T_GRID), axis=0), f.shape)
        out.append(rmise(f, g, t=T_GRID, x=X_GRID))
    return float(np.mean(out))


def one_cov_fit(N, seed, n_iter=N_ITER, drop_covariates=False):
    """Fit the correctly specified (or covariate-free) model to one one_cov dataset."""
    spec = ScenarioSpec("one_cov", N=N, seed=seed)
    ds, truth = generate(spec)
    if drop_covariates:
        ds = FunctionalDataset(ds.times, ds.values, np.zeros((N, 0)))
    data = ModelData(ds, spec.basis())
    chain = smp.run_chain(data, 2, 3, HyperParams(), study_config(seed, n_iter))
    chain = rescale_separability(relabel_chain(chain))
    ref = canonical_truth(truth)
    score = mean_structure_rmise(chain, ref, spec.basis())
    alloc = rmse_alloc(ref["Z"], chain.draws["Z"].mean(axis=0))
    return {"rmise": score, "rmse_alloc": alloc}


def ic_fits(seed, Ks=(2, 3, 4), N=150, n_iter=N_ITER, sigma2=1.0):
    """BIC and plug-in conditional log-likelihood for each K on one IC-study dataset."""
    spec = ScenarioSpec("ic_study", N=N, seed=seed, sigma2=sigma2)
    ds, _ = generate(spec)
    data = ModelData(ds, spec.basis())
    out = {}
    for K in Ks:
        chain = smp.run_chain(data, K, 2, HyperParams(), study_config(seed, n_iter))
        ic = information_criteria(chain, data)
        out[K] = {"bic": float(ic["bic"]), "loglik": float(ic["loglik"])}
    return out
