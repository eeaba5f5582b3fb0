import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.interpolate import BSpline

from cafmm.basis import BasisSpec, build_basis, difference_quadratic, penalty_matrix
from cafmm.errors import ConfigurationError, DomainError
from oracles import basis_column, clamped_knots


def test_degree_zero_indicator_basis():
    S = build_basis(BasisSpec(num_basis=2, degree=0, domain=(0, 1)), [0.25, 0.75])
    np.testing.assert_array_equal(S, [[1.0, 0.0], [0.0, 1.0]])


def test_cubic_matches_recursion_oracle_at_midpoint():
    spec = BasisSpec(num_basis=8, degree=3, domain=(0, 1))
    got = build_basis(spec, [0.5])[:, 0]
    want = basis_column(8, 3, 0.0, 1.0, 0.5)
    np.testing.assert_allclose(got, want, atol=1e-12, rtol=0)


@pytest.mark.parametrize("P,d", [(4, 3), (5, 2), (8, 3), (10, 1), (6, 0), (12, 4)])
def test_matches_recursion_oracle_on_grid(P, d):
    spec = BasisSpec(num_basis=P, degree=d, domain=(-1.0, 2.5))
    # 38 points keep interior knots off the grid (degree 0 jumps there)
    grid = np.concatenate([np.linspace(-1, 2.5, 38), [2.5, -1.0]])
    S = build_basis(spec, grid)
    want = np.column_stack([basis_column(P, d, -1.0, 2.5, t) for t in grid])
    np.testing.assert_allclose(S, want, atol=1e-12, rtol=0)


def test_matches_scipy_design_matrix_in_interior():
    spec = BasisSpec(num_basis=9, degree=3, domain=(0, 2))
    t = np.linspace(0, 2, 41)[:-1]
    kn = np.array(clamped_knots(9, 3, 0.0, 2.0))
    ref = BSpline.design_matrix(t, kn, 3).toarray().T
    np.testing.assert_allclose(build_basis(spec, t), ref, atol=1e-12)


def test_right_end_belongs_to_last_function():
    spec = BasisSpec(num_basis=6, degree=3, domain=(0, 1))
    col = build_basis(spec, [1.0])[:, 0]
    np.testing.assert_array_equal(col, np.eye(6)[-1])


@settings(max_examples=60, deadline=None)
@given(
    P_extra=st.integers(0, 8),
    d=st.integers(0, 4),
    t=st.floats(0, 1, allow_nan=False),
)
def test_partition_of_unity_and_local_support(P_extra, d, t):
    P = d + 1 + P_extra
    S = build_basis(BasisSpec(num_basis=P, degree=d, domain=(0, 1)), [t])
    assert np.all(S >= 0)
    assert abs(S.sum() - 1.0) < 1e-12
    assert np.count_nonzero(S) <= d + 1


def test_deterministic():
    spec = BasisSpec(num_basis=8)
    g = np.linspace(0, 1, 25)
    assert build_basis(spec, g).tobytes() == build_basis(spec, g).tobytes()


def test_errors():
    with pytest.raises(ConfigurationError):
        BasisSpec(num_basis=3, degree=3)
    with pytest.raises(DomainError):
        build_basis(BasisSpec(num_basis=5), [1.2])
    with pytest.raises(ConfigurationError):
        penalty_matrix(1)


def test_penalty_p3():
    np.testing.assert_array_equal(penalty_matrix(3), [[1, -1, 0], [-1, 2, -1], [0, -1, 1]])


def test_penalty_quadratic_examples():
    Pm = penalty_matrix(3)
    x = np.array([1.0, 2.0, 4.0])
    assert x @ Pm @ x == 5.0
    for P in (2, 5, 9):
        one = np.ones(P)
        assert one @ penalty_matrix(P) @ one == 0.0


@pytest.mark.parametrize("P", [2, 3, 8, 15])
def test_penalty_structure(P):
    Pm = penalty_matrix(P)
    np.testing.assert_array_equal(Pm, Pm.T)
    np.testing.assert_array_equal(Pm.sum(axis=1), 0)
    assert np.linalg.matrix_rank(Pm) == P - 1
    assert np.linalg.eigvalsh(Pm).min() > -1e-12


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(-1000, 1000), min_size=2, max_size=12))
def test_quadratic_form_equals_difference_sum(v):
    v = np.array(v, dtype=float)
    assert v @ penalty_matrix(v.size) @ v == difference_quadratic(v)
