import numpy as np
import pytest

from cafmm.basis import BasisSpec
from cafmm.cov_ext import XiBlock
from cafmm.model import FunctionalDataset, HyperParams, ModelData, ParameterState


def random_dataset(rng, N=6, P=5, R=2, n_range=(6, 10)):
    times, values = [], []
    for _ in range(N):
        n = int(rng.integers(n_range[0], n_range[1] + 1))
        t = np.sort(rng.uniform(0, 1, n))
        times.append(t)
        values.append(rng.normal(0, 2, n))
    X = rng.normal(size=(N, R))
    return FunctionalDataset(times=times, values=values, X=X)


def random_state(rng, N, K=2, M=2, P=5, R=2, ext=False):
    Z = rng.dirichlet(np.full(K, 2.0), size=N) if K > 1 else np.ones((N, 1))
    st = ParameterState(
        nu=rng.normal(size=(K, P)),
        eta=rng.normal(size=(K, P, R)),
        phi=rng.normal(size=(K, M, P)),
        chi=rng.normal(size=(N, M)),
        Z=Z,
        pi=rng.dirichlet(np.full(K, 3.0)) if K > 1 else np.ones(1),
        alpha3=float(rng.uniform(0.5, 3)),
        sigma2=float(rng.uniform(0.5, 2)),
        delta=rng.uniform(0.5, 2, size=(K, M)),
        a1=rng.uniform(1, 3, size=K),
        a2=rng.uniform(1, 4, size=K),
        gamma=rng.uniform(0.5, 2, size=(K, P, M)),
        tau_nu=rng.uniform(0.5, 2, size=K),
        tau_eta=rng.uniform(0.5, 2, size=(K, R)),
    )
    if ext:
        st.ext = XiBlock(
            xi=rng.normal(scale=0.5, size=(K, M, P, R)),
            delta_xi=rng.uniform(0.5, 2, size=(K, R, M)),
            a1_xi=rng.uniform(1, 3, size=(K, R)),
            a2_xi=rng.uniform(1, 4, size=(K, R)),
            gamma_xi=rng.uniform(0.5, 2, size=(K, R, P, M)),
        )
    return st


@pytest.fixture
def small_problem():
    rng = np.random.default_rng(20240611)
    ds = random_dataset(rng, N=6, P=5, R=2)
    data = ModelData(ds, BasisSpec(num_basis=5, degree=3, domain=(0.0, 1.0)))
    return rng, data, HyperParams()


def synthetic_chain(rng, n_draws=50, N=12, K=3, M=2, P=5, R=1, z_range=None):
    """A chain-shaped fixture: draws jitter around one well-separated allocation matrix."""
    from cafmm.sampler import ChainStore

    if z_range is None:
        base = rng.dirichlet(np.full(K, 0.5), size=N)
    else:
        z1 = rng.uniform(*z_range, size=N)
        z1[:2] = z_range
        base = np.column_stack([z1, 1 - z1])
    draws = {"nu": [], "eta": [], "phi": [], "chi": [], "Z": [], "sigma2": [], "pi": [], "alpha3": []}
    for _ in range(n_draws):
        Z = base + 0.01 * rng.normal(size=base.shape)
        Z = np.clip(Z, 0.01, None)
        Z /= Z.sum(axis=1, keepdims=True)
        draws["nu"].append(rng.normal(size=(K, P)))
        draws["eta"].append(rng.normal(size=(K, P, R)))
        draws["phi"].append(rng.normal(size=(K, M, P)))
        draws["chi"].append(rng.normal(size=(N, M)))
        draws["Z"].append(Z)
        draws["sigma2"].append(rng.uniform(0.5, 2))
        draws["pi"].append(rng.dirichlet(np.ones(K)))
        draws["alpha3"].append(rng.uniform(0.5, 3))
    draws = {k: np.array(v) for k, v in draws.items()}
    meta = {"K": K, "M": M, "P": P, "R": R, "N": N, "basis_degree": 3, "basis_domain": [0.0, 1.0]}
    return ChainStore(draws=draws, log_post=rng.normal(size=n_draws), acceptance={}, meta=meta)


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
