"""B-spline bases on clamped equidistant knots and the first-order difference penalty."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, DomainError


@dataclass(frozen=True)
class BasisSpec:
    """Clamped B-spline basis with equidistant interior knots.

    Parameters
    ----------
    num_basis : int
        Number of basis functions ``P``.
    degree : int
        Polynomial degree (3 gives cubic splines).
    domain : tuple of float
        Closed interval ``(t_lo, t_hi)``.
    """

    num_basis: int
    degree: int = 3
    domain: tuple[float, float] = (0.0, 1.0)

    def __post_init__(self):
        if self.degree < 0:
            raise ConfigurationError("degree must be non-negative")
        if self.num_basis < self.degree + 1:
            raise ConfigurationError(
                f"num_basis={self.num_basis} must be at least degree+1={self.degree + 1}"
            )
        lo, hi = float(self.domain[0]), float(self.domain[1])
        if not (np.isfinite(lo) and np.isfinite(hi)) or hi <= lo:
            raise ConfigurationError(f"invalid domain {self.domain}")
        object.__setattr__(self, "domain", (lo, hi))

    @property
    def n_interior(self) -> int:
        return self.num_basis - self.degree - 1

    def knots(self) -> np.ndarray:
        lo, hi = self.domain
        inner = np.linspace(lo, hi, self.n_interior + 2)[1:-1]
        d = self.degree
        return np.concatenate([np.full(d + 1, lo), inner, np.full(d + 1, hi)])

    @classmethod
    def from_times(cls, times, num_basis: int, degree: int = 3) -> "BasisSpec":
        """Basis whose domain spans the observed time range."""
        t = np.asarray(times, dtype=float)
        return cls(num_basis=num_basis, degree=degree, domain=(float(t.min()), float(t.max())))


def _find_span(knots: np.ndarray, t: np.ndarray, P: int, d: int) -> np.ndarray:
    # index s with knots[s] <= t < knots[s+1]; the right end belongs to the last span
    span = np.searchsorted(knots, t, side="right") - 1
    return np.clip(span, d, P - 1)


def build_basis(spec: BasisSpec, grid) -> np.ndarray:
    """Evaluate the basis on ``grid``.

    Returns a ``P x n`` matrix whose column ``j`` is ``B(grid[j])``. The
    triangular Cox-de Boor scheme is evaluated only on the active span.
    """
    t = np.atleast_1d(np.asarray(grid, dtype=float))
    if t.ndim != 1:
        raise DomainError("grid must be one-dimensional")
    lo, hi = spec.domain
    if t.size and (not np.all(np.isfinite(t)) or t.min() < lo or t.max() > hi):
        raise DomainError(f"grid points must lie in [{lo}, {hi}]")
    P, d = spec.num_basis, spec.degree
    knots = spec.knots()
    n = t.size
    span = _find_span(knots, t, P, d)

    # N[:, r] holds the value of basis function span-d+r
    N = np.zeros((n, d + 1))
    N[:, 0] = 1.0
    left = np.zeros((n, d + 1))
    right = np.zeros((n, d + 1))
    for j in range(1, d + 1):
        left[:, j] = t - knots[span + 1 - j]
        right[:, j] = knots[span + j] - t
        saved = np.zeros(n)
        for r in range(j):
            denom = right[:, r + 1] + left[:, j - r]
            temp = N[:, r] / denom
            N[:, r] = saved + right[:, r + 1] * temp
            saved = left[:, j - r] * temp
        N[:, j] = saved

    out = np.zeros((P, n))
    cols = np.arange(n)
    for r in range(d + 1):
        out[span - d + r, cols] = N[:, r]
    return out


def penalty_matrix(P: int) -> np.ndarray:
    """Tridiagonal first-order random-walk penalty ``D'D``."""
    if int(P) != P or P < 2:
        raise ConfigurationError("penalty_matrix needs P >= 2")
    P = int(P)
    diag = np.full(P, 2.0)
    diag[0] = diag[-1] = 1.0
    return np.diag(diag) - np.eye(P, k=1) - np.eye(P, k=-1)


def difference_quadratic(v) -> float:
    """``sum_p (v_p - v_{p+1})^2``; equals ``v' P v``."""
    v = np.asarray(v, dtype=float)
    return float(np.sum(np.diff(v) ** 2))
