"""Rank conditions for identifiability, label alignment and K=2 separability rescaling."""

from __future__ import annotations

import itertools
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigurationError, ValidationError

log = logging.getLogger(__name__)

RANK_TOL = 1e-10
MAX_RELABEL_K = 8

# chain fields whose first non-iteration axis indexes features
FEATURE_AXIS_FIELDS = (
    "nu", "eta", "phi", "pi", "delta", "a1", "a2", "gamma", "tau_nu", "tau_eta",
    "xi", "delta_xi", "a1_xi", "a2_xi", "gamma_xi",
)


def numerical_rank(A, rel_tol: float = RANK_TOL) -> tuple[int, np.ndarray]:
    """Rank from singular values above ``rel_tol * sigma_max``."""
    A = np.asarray(A, dtype=float)
    if A.size == 0:
        return 0, np.zeros(0)
    s = np.linalg.svd(A, compute_uv=False)
    if s[0] == 0:
        return 0, s
    return int(np.sum(s > rel_tol * s[0])), s


def build_C_matrix(Z) -> np.ndarray:
    """Rows ``[z_1^2, ..., z_K^2, 2 z_1 z_2, ..., 2 z_{K-1} z_K]``."""
    Z = np.asarray(Z, dtype=float)
    if Z.ndim != 2:
        raise ValidationError("Z must be N x K")
    K = Z.shape[1]
    cross = [2.0 * Z[:, a] * Z[:, b] for a, b in itertools.combinations(range(K), 2)]
    return np.column_stack([Z**2] + cross) if cross else Z**2


@dataclass
class AssumptionReport:
    a1_design_ok: bool
    a2_alloc_ok: bool
    a3_sampling_ok: bool
    details: dict = field(default_factory=dict)

    @property
    def all_ok(self) -> bool:
        return self.a1_design_ok and self.a2_alloc_ok and self.a3_sampling_ok

    def to_dict(self) -> dict:
        return asdict(self)


def check_assumptions(X, Z, curve_lengths, P: int, K: int | None = None) -> AssumptionReport:
    """Evaluate the three sufficient conditions for identifiability.

    1. ``[1 X]`` has full column rank.
    2. ``N >= (K^2 + K)/2`` and the allocation matrix ``C`` has full column rank.
    3. Every curve has more observations than basis functions.
    """
    Z = np.asarray(Z, dtype=float)
    N = Z.shape[0]
    K = Z.shape[1] if K is None else K
    X = np.asarray(X, dtype=float).reshape(N, -1)
    if np.any(Z < -1e-12) or np.any(np.abs(Z.sum(axis=1) - 1) > 1e-8):
        raise ValidationError("Z rows must lie on the simplex")

    D = np.column_stack([np.ones(N), X])
    r1, s1 = numerical_rank(D)
    a1 = r1 == D.shape[1]

    need = (K * K + K) // 2
    C = build_C_matrix(Z)
    r2, s2 = numerical_rank(C)
    a2 = N >= need and r2 == need

    n = np.asarray(curve_lengths)
    short = np.flatnonzero(n <= P)
    a3 = short.size == 0

    details = {
        "design_rank": r1,
        "design_columns": int(D.shape[1]),
        "design_deficit": int(D.shape[1] - r1),
        "C_rank": r2,
        "C_columns": need,
        "C_deficit": int(need - r2),
        "N": int(N),
        "N_required": need,
        "short_curves": short.tolist(),
        "P": int(P),
    }
    return AssumptionReport(bool(a1), bool(a2), bool(a3), details)


def _apply_perm(draws: dict, s: int, perm) -> None:
    perm = np.asarray(perm)
    for name in FEATURE_AXIS_FIELDS:
        if name in draws:
            draws[name][s] = draws[name][s][perm]
    if "Z" in draws:
        draws["Z"][s] = draws["Z"][s][:, perm]


def best_permutation(Z, Z_ref) -> tuple:
    """Column permutation of ``Z`` closest to ``Z_ref`` in squared distance."""
    K = Z.shape[1]
    if K > MAX_RELABEL_K:
        raise ConfigurationError(f"relabelling by exhaustive search needs K <= {MAX_RELABEL_K}")
    # cost[a, b] = ||Z[:, a] - Z_ref[:, b]||^2
    cost = ((Z[:, :, None] - Z_ref[:, None, :]) ** 2).sum(axis=0)
    best, best_cost = None, np.inf
    for perm in itertools.permutations(range(K)):
        c = cost[list(perm), range(K)].sum()
        if c < best_cost:
            best, best_cost = perm, c
    return best


def relabel_chain(chain, reference: int | None = None):
    """Align feature labels of every draw to a reference draw.

    The reference defaults to the draw with the highest log posterior. The
    applied permutations are recorded in ``meta["relabel_permutations"]``.
    """
    from .sampler import ChainStore

    if reference is None:
        reference = int(np.argmax(chain.log_post))
    draws = {k: np.array(v, copy=True) for k, v in chain.draws.items()}
    Z_ref = np.array(draws["Z"][reference])
    perms = []
    for s in range(chain.n_stored):
        perm = best_permutation(draws["Z"][s], Z_ref)
        if list(perm) != list(range(len(perm))):
            _apply_perm(draws, s, perm)
        perms.append(list(perm))
    meta = dict(chain.meta)
    meta["relabel_reference"] = reference
    meta["relabel_permutations"] = perms
    return ChainStore(draws=draws, log_post=chain.log_post.copy(), acceptance=dict(chain.acceptance), meta=meta)


def separability_map(Z) -> np.ndarray | None:
    """Matrix ``T`` with ``Z = Z_new @ T`` mapping column 1 onto [0, 1] (K = 2)."""
    z = Z[:, 0]
    lo, hi = float(z.min()), float(z.max())
    if hi - lo <= 1e-12:
        return None
    return np.array([[hi, 1.0 - hi], [lo, 1.0 - lo]])


def rescale_state_arrays(arrays: dict, T: np.ndarray, lo: float, hi: float) -> None:
    """Apply the separability map in place to one draw's arrays."""
    z1 = (arrays["Z"][:, 0] - lo) / (hi - lo)
    z1 = np.clip(z1, 0.0, 1.0)
    arrays["Z"] = np.column_stack([z1, 1.0 - z1])
    arrays["nu"] = T @ arrays["nu"]
    arrays["eta"] = np.einsum("kj,jpr->kpr", T, arrays["eta"])
    arrays["phi"] = np.einsum("kj,jmp->kmp", T, arrays["phi"])
    if "xi" in arrays:
        arrays["xi"] = np.einsum("kj,jmpr->kmpr", T, arrays["xi"])


def rescale_separability(chain):
    """Per-draw affine rescaling so that both simplex vertices are attained (K = 2).

    The feature parameters receive the compensating map, leaving every
    curve's mean and latent covariance unchanged. Degenerate draws (all
    allocations equal) are left untouched and listed in
    ``meta["rescale_skipped"]``.
    """
    from .sampler import ChainStore

    if chain.K != 2:
        raise ConfigurationError("separability rescaling is implemented for K = 2 only")
    draws = {k: np.array(v, copy=True) for k, v in chain.draws.items()}
    skipped = []
    names = [n for n in ("Z", "nu", "eta", "phi", "xi") if n in draws]
    for s in range(chain.n_stored):
        Z = draws["Z"][s]
        T = separability_map(Z)
        if T is None:
            log.warning("separability rescaling skipped draw %d: allocations are constant", s)
            skipped.append(s)
            continue
        arr = {n: draws[n][s] for n in names}
        rescale_state_arrays(arr, T, float(Z[:, 0].min()), float(Z[:, 0].max()))
        for n in names:
            draws[n][s] = arr[n]
    meta = dict(chain.meta)
    meta["rescale_skipped"] = skipped
    return ChainStore(draws=draws, log_post=chain.log_post.copy(), acceptance=dict(chain.acceptance), meta=meta)
