import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mflq.errors import DimensionError, RankDeficient
from mflq.linalg import duplication_matrix, from_vec_plus, kcal, lstsq_normal, numerical_rank, unvec, vec, vec_plus

floats = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)


def sym(M):
    return M + M.T


def test_vec_is_column_stacking():
    M = np.array([[1.0, 2.0], [3.0, 4.0]])
    assert vec(M).tolist() == [1.0, 3.0, 2.0, 4.0]
    assert np.array_equal(unvec(vec(M), (2, 2)), M)


def test_vec_plus_doubles_off_diagonal():
    P = np.array([[1.0, 2.0, 3.0], [2.0, 4.0, 5.0], [3.0, 5.0, 6.0]])
    assert vec_plus(P).tolist() == [1.0, 4.0, 6.0, 4.0, 10.0, 6.0]
    assert np.array_equal(from_vec_plus(vec_plus(P), 3), P)


def test_vec_plus_rejects_asymmetric():
    with pytest.raises(DimensionError):
        vec_plus(np.array([[1.0, 2.0], [0.0, 1.0]]))
    with pytest.raises(DimensionError):
        vec_plus(np.ones((2, 3)))


def test_duplication_matrix_n2_frozen():
    T = duplication_matrix(2).T
    assert T.tolist() == [[1, 0, 0], [0, 0.5, 0], [0, 0.5, 0], [0, 0, 1]]


@pytest.mark.parametrize("n", range(1, 7))
def test_duplication_rank(n):
    dup = duplication_matrix(n)
    assert dup.T.shape == (n * n, n * (n + 1) // 2)
    assert numerical_rank(dup.T) == n * (n + 1) // 2 == dup.dim


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 6).flatmap(lambda n: arrays(np.float64, (n, n), elements=floats)))
def test_vec_equals_T_vec_plus_exactly(M):
    P = sym(M)
    n = P.shape[0]
    assert np.array_equal(duplication_matrix(n).T @ vec_plus(P), vec(P))


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 6).flatmap(lambda n: st.tuples(*[arrays(np.float64, (n, n), elements=st.floats(-10, 10)) for _ in range(3)])))
def test_vec_abc_identity(mats):
    A, B, C = mats
    lhs = vec(A @ B @ C)
    rhs = np.kron(C.T, A) @ vec(B)
    scale = 1.0 + np.linalg.norm(A) * np.linalg.norm(B) * np.linalg.norm(C)
    assert np.max(np.abs(lhs - rhs)) <= 1e-12 * scale


def test_kcal_row_is_quadratic_form():
    rng = np.random.default_rng(3)
    for n in range(1, 5):
        x = rng.normal(size=n)
        P = sym(rng.normal(size=(n, n)))
        assert kcal(x) @ vec(P) == pytest.approx(x @ P @ x, rel=1e-13)
        assert kcal(x).shape == (1, n * n)


def test_kcal_matrix_is_transposed_kron():
    A = np.arange(6.0).reshape(2, 3)
    assert np.array_equal(kcal(A), np.kron(A.T, A.T))


@pytest.mark.parametrize("n", range(1, 7))
def test_planted_least_squares_recovery(n):
    rng = np.random.default_rng(100 + n)
    dup = duplication_matrix(n)
    P = sym(rng.normal(size=(n, n)))
    rows = np.array([kcal(x)[0] for x in rng.uniform(0, 20, size=(dup.dim + 5, n))])
    b = rows @ vec(P)
    est = from_vec_plus(lstsq_normal(rows @ dup.T, b), n)
    assert np.max(np.abs(est - P)) <= 1e-12 * max(1.0, np.abs(P).max()) * 10


def test_rank_deficient_reports_rank():
    M = np.array([[1.0, 2.0], [2.0, 4.0], [3.0, 6.0]])
    with pytest.raises(RankDeficient) as ei:
        lstsq_normal(M, np.ones(3), which="P")
    assert (ei.value.rank, ei.value.cols, ei.value.which) == (1, 2, "P")


def test_zero_matrix_rank_zero():
    assert numerical_rank(np.zeros((4, 3))) == 0
    with pytest.raises(RankDeficient) as ei:
        lstsq_normal(np.zeros((4, 3)), np.zeros(4))
    assert ei.value.rank == 0


def test_lstsq_matches_normal_equations():
    rng = np.random.default_rng(0)
    M = rng.normal(size=(20, 4))
    b = rng.normal(size=20)
    ref = np.linalg.solve(M.T @ M, M.T @ b)
    assert np.allclose(lstsq_normal(M, b), ref, rtol=1e-12, atol=1e-12)
