import numpy as np
import pytest
import scipy.sparse as sp

from gmrf_sampler.errors import (
    DimensionCapError,
    DimensionMismatchError,
    ImaginaryResidueError,
    MatrixMarketError,
    NonFiniteInputError,
    NotSPDError,
    SymmetryError,
)
from gmrf_sampler.operators import (
    BlockCirculantOperator,
    DenseOperator,
    DiagonalOperator,
    LinearOperator,
    SparseOperator,
    SumOperator,
    canonical_prior,
    checked_real,
    identity_operator,
    load_matrix_market,
    rw2_gallery,
    to_dense,
    torus_precision_base,
)
from gmrf_sampler.utils import random_stream

from tests.utils import dense_block_circulant


def _delta(grid):
    base = np.zeros(grid)
    base[0, 0] = 1.0
    return base


def test_delta_kernel_is_identity():
    Q = BlockCirculantOperator(_delta((4, 4)))
    v = random_stream(0).standard_normal(16)
    np.testing.assert_allclose(Q.matvec(v), v, atol=1e-12)


def test_one_dimensional_circulant_matvec():
    Q = BlockCirculantOperator(np.array([2.0, -1.0, 0.0, -1.0]))
    np.testing.assert_allclose(Q.matvec(np.array([1.0, 2.0, 3.0, 4.0])), [-4.0, 0.0, 0.0, 4.0], atol=1e-12)


def test_singular_circulant_reports_zero_eigenvalue():
    Q = BlockCirculantOperator(np.array([2.0, -1.0, 0.0, -1.0]))
    np.testing.assert_allclose(Q.eigenvalues, [0.0, 2.0, 4.0, 2.0], atol=1e-12)
    with pytest.raises(NotSPDError) as info:
        Q.spectrum()
    assert info.value.index == 0


def test_scaled_delta_spectrum():
    Q = BlockCirculantOperator(2.0 * _delta((3, 5)))
    np.testing.assert_allclose(Q.spectrum(), np.full(15, 2.0))
    assert Q.lambda_min == pytest.approx(2.0)


def test_circulant_matches_dense_oracle():
    Q = canonical_prior(8)
    dense = dense_block_circulant(Q.base.reshape(Q.grid))
    v = random_stream(1).standard_normal(Q.dim)
    np.testing.assert_allclose(Q.matvec(v), dense @ v, rtol=1e-10, atol=1e-10 * np.abs(dense @ v).max())


def test_fourier_modes_are_eigenvectors():
    Q = BlockCirculantOperator(torus_precision_base((6, 4), tau=1.0, kappa=1.0, nu=1, h=1.0))
    rows, cols = np.meshgrid(np.arange(6), np.arange(4), indexing="ij")
    for k1, k2 in [(0, 0), (1, 0), (2, 3), (5, 1)]:
        mode = np.cos(2.0 * np.pi * (k1 * rows / 6 + k2 * cols / 4)).ravel()
        eigenvalue = Q.eigenvalues.reshape(6, 4)[k1, k2]
        np.testing.assert_allclose(Q.matvec(mode), eigenvalue * mode, atol=1e-10)


def test_asymmetric_base_is_rejected():
    with pytest.raises(SymmetryError):
        BlockCirculantOperator(np.array([1.0, 0.5, 0.0, 0.0]))


def test_prior_spectrum_formula():
    Q = canonical_prior(16, tau=2.0, kappa=3.0, nu=2)
    assert Q.lambda_min == pytest.approx(2.0 * 3.0**4, rel=1e-10)
    assert Q.lambda_max == pytest.approx(2.0 * (9.0 + 8.0 * 16**2) ** 2, rel=1e-10)


def test_apply_power_inverts():
    Q = canonical_prior(8)
    v = random_stream(2).standard_normal(Q.dim)
    back = Q.matvec(Q.apply_power(v, -1.0))
    np.testing.assert_allclose(back, v, rtol=1e-9, atol=1e-9)
    half = Q.apply_power(Q.apply_power(v, -0.5), -0.5)
    np.testing.assert_allclose(half, Q.apply_power(v, -1.0), rtol=1e-9, atol=1e-14)


def test_checked_real_rejects_imaginary_residue():
    with pytest.raises(ImaginaryResidueError):
        checked_real(np.array([1.0 + 1e-3j, 2.0]), scale=1.0)
    np.testing.assert_array_equal(checked_real(np.array([1.0 + 1e-14j, 2.0]), scale=1.0), [1.0, 2.0])


def test_sparse_diagonal_and_sum():
    D = DiagonalOperator([1.0, 2.0, 3.0])
    np.testing.assert_allclose(D.matvec(np.array([1.0, 1.0, 1.0])), [1.0, 2.0, 3.0])

    S = SumOperator([DiagonalOperator([1.0, 1.0]), DiagonalOperator([2.0, 2.0])])
    np.testing.assert_allclose(to_dense(S).matrix, 3.0 * np.eye(2))


def test_sum_is_evaluated_in_order_exactly():
    A = canonical_prior(4)
    B = DiagonalOperator(np.linspace(1.0, 2.0, 16))
    S = SumOperator([A, B], weights=[0.3, 2.5])
    v = random_stream(3).standard_normal(16)
    np.testing.assert_array_equal(S.matvec(v), 0.3 * A.matvec(v) + 2.5 * B.matvec(v))
    assert S.ffts_per_matvec == 2


def test_operators_are_symmetric():
    rng = random_stream(4)
    u, v = rng.standard_normal(25), rng.standard_normal(25)
    operators = [
        canonical_prior(5),
        SparseOperator(sp.eye_array(25) * 4.0 - sp.eye_array(25, k=1) - sp.eye_array(25, k=-1)),
        DiagonalOperator(rng.uniform(1.0, 2.0, 25)),
        SumOperator([canonical_prior(5), identity_operator(25)]),
    ]
    for op in operators:
        left, right = u @ op.matvec(v), v @ op.matvec(u)
        assert abs(left - right) <= 1e-10 * max(abs(left), 1.0)


def test_to_dense_identity():
    np.testing.assert_array_equal(to_dense(identity_operator(3)).matrix, np.eye(3))


def test_to_dense_cap():
    with pytest.raises(DimensionCapError):
        to_dense(DiagonalOperator(np.ones(4097)))


class _MatrixMap(LinearOperator):
    def __init__(self, matrix):
        super().__init__(matrix.shape[0])
        self._matrix = matrix

    def _matvec(self, v):
        return self._matrix @ v


def test_to_dense_rejects_asymmetric_matvecs():
    with pytest.raises(SymmetryError):
        to_dense(_MatrixMap(np.array([[2.0, 1.0], [0.0, 2.0]])))
    nearly = np.array([[2.0, 1.0], [1.0 + 1e-14, 2.0]])
    np.testing.assert_array_equal(to_dense(_MatrixMap(nearly)).matrix, 0.5 * (nearly + nearly.T))


def test_vector_checks():
    Q = identity_operator(4)
    with pytest.raises(DimensionMismatchError):
        Q.matvec(np.ones(3))
    with pytest.raises(NonFiniteInputError):
        Q.matvec(np.array([1.0, np.nan, 0.0, 0.0]))


def test_sparse_checks():
    with pytest.raises(SymmetryError):
        SparseOperator(np.array([[2.0, 1.0], [0.0, 2.0]]))
    with pytest.raises(NotSPDError):
        SparseOperator(np.array([[2.0, 0.0], [0.0, 0.0]]))


def test_dense_operator_checks():
    with pytest.raises(SymmetryError):
        DenseOperator(np.array([[1.0, 2.0], [0.0, 1.0]]))
    with pytest.raises(DimensionMismatchError):
        DenseOperator(np.ones((2, 3)))


def _write(path, text):
    path.write_text(text)
    return path


def test_matrix_market_single_entry(tmp_path):
    path = _write(tmp_path / "one.mtx", "%%MatrixMarket matrix coordinate real symmetric\n1 1 1\n1 1 5.0\n")
    Q = load_matrix_market(path)
    np.testing.assert_allclose(Q.matvec(np.array([2.0])), [10.0])


def test_matrix_market_symmetric_lower_triangle(tmp_path):
    text = (
        "%%MatrixMarket matrix coordinate real symmetric\n"
        "3 3 5\n"
        "1 1 2.0\n2 1 -1.0\n2 2 2.0\n3 2 -1.0\n3 3 2.0\n"
    )
    Q = load_matrix_market(_write(tmp_path / "tri.mtx", text))
    expected = 2.0 * np.eye(3) - np.eye(3, k=1) - np.eye(3, k=-1)
    np.testing.assert_allclose(Q.matrix.toarray(), expected)
    assert Q.matrix.nnz == 7


def test_matrix_market_general_asymmetric(tmp_path):
    text = "%%MatrixMarket matrix coordinate real general\n2 2 3\n1 1 2.0\n1 2 1.0\n2 2 2.0\n"
    with pytest.raises(SymmetryError):
        load_matrix_market(_write(tmp_path / "asym.mtx", text))


def test_matrix_market_array_format(tmp_path):
    text = "%%MatrixMarket matrix array real general\n2 2\n1.0\n0.0\n0.0\n1.0\n"
    with pytest.raises(MatrixMarketError):
        load_matrix_market(_write(tmp_path / "dense.mtx", text))


def test_matrix_market_garbage(tmp_path):
    with pytest.raises(MatrixMarketError):
        load_matrix_market(_write(tmp_path / "bad.mtx", "this is not a matrix\n"))


def test_rw2_gallery_is_spd():
    Q = rw2_gallery(4)
    eigenvalues = np.linalg.eigvalsh(Q.matrix.toarray())
    assert Q.dim == 16
    assert eigenvalues.min() > 0.0


def test_circulant_csv(tmp_path):
    Q = canonical_prior(4)
    Q.to_csv(tmp_path / "base.csv")
    loaded = BlockCirculantOperator.from_csv(tmp_path / "base.csv")
    assert loaded.grid == (4, 4)
    np.testing.assert_allclose(loaded.eigenvalues, Q.eigenvalues)
