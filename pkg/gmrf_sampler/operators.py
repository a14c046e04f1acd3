"""Matrix-free symmetric positive definite operators.

Every operator is immutable once built and exposes `matvec`; the concrete
forms cover the structures a precision matrix usually has: block circulant
(stationary fields on a torus, applied with FFTs), sparse (GMRFs), diagonal,
weighted sums of these, and an explicit dense form kept for oracles.
"""

from abc import ABC, abstractmethod
from pathlib import Path
from typing import Optional, Sequence, Tuple

import logfire
import numpy as np
import scipy.fft
import scipy.io
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
from gmrf_sampler.utils import read_grid_csv, write_grid_csv


DENSE_DIMENSION_CAP = 4096
IMAGINARY_RESIDUE_RTOL = 1e-10
SYMMETRY_RTOL = 1e-12
MATVEC_SYMMETRY_RTOL = 1e-8


def _readonly(array: np.ndarray) -> np.ndarray:
    array = np.array(array, dtype=float, copy=True)
    array.flags.writeable = False
    return array


class LinearOperator(ABC):
    """Symmetric operator of dimension n with a checked `matvec`."""

    ffts_per_matvec: int = 0

    def __init__(self, dim: int):
        self._dim = int(dim)

    @property
    def dim(self) -> int:
        return self._dim

    @property
    def shape(self) -> Tuple[int, int]:
        return (self._dim, self._dim)

    def matvec(self, v: np.ndarray) -> np.ndarray:
        """Return op·v after checking length and finiteness of v."""
        return self._matvec(self.check_vector(v))

    def check_vector(self, v: np.ndarray) -> np.ndarray:
        v = np.asarray(v, dtype=float)
        if v.ndim != 1 or v.shape[0] != self._dim:
            raise DimensionMismatchError(
                f"operator has dimension {self._dim}, vector has shape {v.shape}"
            )
        if not np.all(np.isfinite(v)):
            raise NonFiniteInputError("input vector contains NaN or Inf")
        return v

    def __matmul__(self, v: np.ndarray) -> np.ndarray:
        return self.matvec(v)

    @abstractmethod
    def _matvec(self, v: np.ndarray) -> np.ndarray: ...


class BlockCirculantOperator(LinearOperator):
    """Block-circulant precision on an (n1, n2) torus, applied by 2-D FFT.

    `base` is the first column of the matrix laid out on the grid, i.e. the
    precision kernel; it must have the torus symmetry
    base[i, j] == base[-i mod n1, -j mod n2], which makes the spectrum real.
    The spectrum is computed once here; positivity is checked by `spectrum()`
    and by every operation that needs an SPD operator.
    """

    ffts_per_matvec = 2

    def __init__(self, base: np.ndarray, grid: Optional[Tuple[int, int]] = None):
        base = np.asarray(base, dtype=float)
        if grid is None:
            grid = base.shape if base.ndim == 2 else (base.size, 1)
        grid = (int(grid[0]), int(grid[1]))
        if base.size != grid[0] * grid[1]:
            raise DimensionMismatchError(f"base of size {base.size} does not fit grid {grid}")
        base = base.reshape(grid)
        if not np.all(np.isfinite(base)):
            raise NonFiniteInputError("circulant base contains NaN or Inf")

        asymmetry = np.max(np.abs(base - _torus_reflection(base)))
        scale = max(np.max(np.abs(base)), np.finfo(float).tiny)
        if asymmetry > SYMMETRY_RTOL * scale:
            raise SymmetryError(
                f"circulant base lacks torus symmetry (max deviation {asymmetry:.3e})"
            )

        super().__init__(base.size)
        self._grid = grid
        self._base = _readonly(base)
        self._eigenvalues = _readonly(scipy.fft.fft2(base).real.ravel())

    @property
    def grid(self) -> Tuple[int, int]:
        return self._grid

    @property
    def base(self) -> np.ndarray:
        return self._base.ravel()

    @property
    def eigenvalues(self) -> np.ndarray:
        """Raw DFT of the base, without the SPD check."""
        return self._eigenvalues

    def spectrum(self) -> np.ndarray:
        """Eigenvalues in 2-D DFT order; raises NotSPDError unless all are > 0."""
        if np.any(self._eigenvalues <= 0.0):
            index = int(np.argmin(self._eigenvalues))
            raise NotSPDError(
                f"circulant operator is not SPD: eigenvalue {self._eigenvalues[index]:.3e} "
                f"at index {index}",
                index=index,
            )
        return self._eigenvalues.copy()

    @property
    def lambda_min(self) -> float:
        return float(np.min(self.spectrum()))

    @property
    def lambda_max(self) -> float:
        return float(np.max(self.spectrum()))

    def apply_spectral(self, v: np.ndarray, multiplier: np.ndarray) -> np.ndarray:
        """Apply the circulant operator whose spectrum is `multiplier` to v."""
        v = self.check_vector(v)
        transformed = scipy.fft.fft2(v.reshape(self._grid))
        result = scipy.fft.ifft2(transformed * np.reshape(multiplier, self._grid))
        scale = float(np.linalg.norm(v)) * max(float(np.max(np.abs(multiplier))), 1.0)
        return checked_real(result, scale)

    def apply_power(self, v: np.ndarray, power: float) -> np.ndarray:
        """Apply Q**power; needs an SPD spectrum for non-integer or negative powers."""
        if power == 1:
            return self.matvec(v)
        return self.apply_spectral(v, self.spectrum() ** power)

    def _matvec(self, v: np.ndarray) -> np.ndarray:
        return self.apply_spectral(v, self._eigenvalues)

    def to_csv(self, path: Path | str) -> None:
        write_grid_csv(path, self._base)

    @classmethod
    def from_csv(cls, path: Path | str) -> "BlockCirculantOperator":
        return cls(read_grid_csv(path))


def checked_real(result: np.ndarray, scale: float) -> np.ndarray:
    """Real part of an inverse FFT, flattened.

    `scale` is ||v|| times the largest multiplier magnitude (at least ||v||);
    an imaginary residue above 1e-10 * scale means the input was not Hermitian.
    """
    residue = float(np.max(np.abs(result.imag))) if result.size else 0.0
    limit = IMAGINARY_RESIDUE_RTOL * scale
    if residue > limit:
        logfire.warn("imaginary FFT residue {residue} above {limit}", residue=residue, limit=limit)
        raise ImaginaryResidueError(
            f"FFT round trip left imaginary residue {residue:.3e} > {limit:.3e}"
        )
    return result.real.ravel()


def _torus_reflection(base: np.ndarray) -> np.ndarray:
    # reflected[i, j] = base[-i mod n1, -j mod n2]
    return np.roll(np.flip(base, axis=(0, 1)), shift=1, axis=(0, 1))


def torus_laplacian_eigenvalues(grid: Tuple[int, int], h: float) -> np.ndarray:
    """Eigenvalues (2-D DFT order) of the 5-point torus Laplacian scaled by h^-2."""
    k1 = np.arange(grid[0])[:, None]
    k2 = np.arange(grid[1])[None, :]
    symbol = 4.0 - 2.0 * np.cos(2.0 * np.pi * k1 / grid[0]) - 2.0 * np.cos(2.0 * np.pi * k2 / grid[1])
    return symbol / h**2


def torus_precision_base(
    grid: Tuple[int, int],
    tau: float = 1.0,
    kappa: float = 10.0,
    nu: int = 2,
    h: Optional[float] = None,
) -> np.ndarray:
    """Base of Q = tau (kappa^2 I + L)^nu with L the 5-point torus Laplacian.

    h defaults to 1 / n1 (unit window).
    """
    if nu not in (1, 2):
        raise ValueError(f"nu must be 1 or 2, got {nu}")
    if tau <= 0 or kappa < 0:
        raise ValueError("tau must be positive and kappa non-negative")
    h = 1.0 / grid[0] if h is None else h
    spectrum = tau * (kappa**2 + torus_laplacian_eigenvalues(grid, h)) ** nu
    base = scipy.fft.ifft2(spectrum).real
    return 0.5 * (base + _torus_reflection(base))


def canonical_prior(
    n: int, tau: float = 1.0, kappa: float = 10.0, nu: int = 2
) -> BlockCirculantOperator:
    """The repository's standard torus prior on an n x n unit-window lattice."""
    return BlockCirculantOperator(torus_precision_base((n, n), tau=tau, kappa=kappa, nu=nu))


class SparseOperator(LinearOperator):
    """Symmetric sparse operator stored in CSR layout."""

    def __init__(self, matrix):
        matrix = sp.csr_array(matrix, dtype=float)
        if matrix.shape[0] != matrix.shape[1]:
            raise DimensionMismatchError(f"sparse operator must be square, got {matrix.shape}")
        matrix.sum_duplicates()
        matrix.sort_indices()
        if matrix.nnz and not np.all(np.isfinite(matrix.data)):
            raise NonFiniteInputError("sparse operator contains NaN or Inf")

        scale = float(np.max(np.abs(matrix.data))) if matrix.nnz else 0.0
        asymmetry = abs(matrix - matrix.T)
        deviation = float(asymmetry.max()) if asymmetry.nnz else 0.0
        if deviation > SYMMETRY_RTOL * scale:
            raise SymmetryError(f"sparse operator is not symmetric (max deviation {deviation:.3e})")

        diagonal = matrix.diagonal()
        if np.any(diagonal <= 0.0):
            index = int(np.argmin(diagonal))
            raise NotSPDError(f"diagonal entry {index} is {diagonal[index]:.3e}", index=index)

        super().__init__(matrix.shape[0])
        self._matrix = matrix

    @property
    def matrix(self) -> sp.csr_array:
        return self._matrix.copy()

    @property
    def indptr(self) -> np.ndarray:
        return self._matrix.indptr.copy()

    @property
    def indices(self) -> np.ndarray:
        return self._matrix.indices.copy()

    @property
    def values(self) -> np.ndarray:
        return self._matrix.data.copy()

    def diagonal(self) -> np.ndarray:
        return self._matrix.diagonal()

    def _matvec(self, v: np.ndarray) -> np.ndarray:
        return self._matrix @ v


class DiagonalOperator(LinearOperator):
    def __init__(self, diag: np.ndarray):
        diag = np.asarray(diag, dtype=float).ravel()
        if not np.all(np.isfinite(diag)):
            raise NonFiniteInputError("diagonal contains NaN or Inf")
        super().__init__(diag.size)
        self._diag = _readonly(diag)

    @property
    def diag(self) -> np.ndarray:
        return self._diag

    def is_positive(self) -> bool:
        return bool(np.all(self._diag > 0.0))

    def _matvec(self, v: np.ndarray) -> np.ndarray:
        return self._diag * v


def identity_operator(n: int) -> DiagonalOperator:
    return DiagonalOperator(np.ones(n))


class SumOperator(LinearOperator):
    """Weighted sum Σ w_k A_k, evaluated in the given order."""

    def __init__(self, operators: Sequence[LinearOperator], weights: Optional[Sequence[float]] = None):
        operators = tuple(operators)
        if not operators:
            raise ValueError("SumOperator needs at least one operator")
        weights = tuple(float(w) for w in (weights if weights is not None else [1.0] * len(operators)))
        if len(weights) != len(operators):
            raise ValueError("one weight per operator is required")
        dims = {op.dim for op in operators}
        if len(dims) != 1:
            raise DimensionMismatchError(f"constituent dimensions differ: {sorted(dims)}")

        super().__init__(operators[0].dim)
        self._operators = operators
        self._weights = weights
        self.ffts_per_matvec = sum(op.ffts_per_matvec for op in operators)

    @property
    def operators(self) -> Tuple[LinearOperator, ...]:
        return self._operators

    @property
    def weights(self) -> Tuple[float, ...]:
        return self._weights

    def _matvec(self, v: np.ndarray) -> np.ndarray:
        result = self._weights[0] * self._operators[0].matvec(v)
        for weight, op in zip(self._weights[1:], self._operators[1:]):
            result = result + weight * op.matvec(v)
        return result


class DenseOperator(LinearOperator):
    """Explicit symmetric matrix; only for oracles and small problems."""

    def __init__(self, matrix: np.ndarray):
        matrix = np.asarray(matrix, dtype=float)
        if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
            raise DimensionMismatchError(f"dense operator must be square, got {matrix.shape}")
        if matrix.shape[0] > DENSE_DIMENSION_CAP:
            raise DimensionCapError(
                f"dense operator of dimension {matrix.shape[0]} exceeds cap {DENSE_DIMENSION_CAP}"
            )
        if not np.all(np.isfinite(matrix)):
            raise NonFiniteInputError("dense operator contains NaN or Inf")
        scale = max(float(np.max(np.abs(matrix))) if matrix.size else 0.0, np.finfo(float).tiny)
        deviation = float(np.max(np.abs(matrix - matrix.T))) if matrix.size else 0.0
        if deviation > SYMMETRY_RTOL * scale:
            raise SymmetryError(f"dense operator is not symmetric (max deviation {deviation:.3e})")

        super().__init__(matrix.shape[0])
        self._matrix = _readonly(matrix)

    @property
    def matrix(self) -> np.ndarray:
        return self._matrix

    def _matvec(self, v: np.ndarray) -> np.ndarray:
        return self._matrix @ v


def to_dense(op: LinearOperator) -> DenseOperator:
    """Materialise op column by column from matvecs on unit vectors.

    Asymmetry up to MATVEC_SYMMETRY_RTOL relative to the largest entry is
    matvec rounding and is averaged away; anything larger raises
    SymmetryError.
    """
    if op.dim > DENSE_DIMENSION_CAP:
        raise DimensionCapError(f"cannot materialise dimension {op.dim} > {DENSE_DIMENSION_CAP}")
    columns = np.empty((op.dim, op.dim))
    unit = np.zeros(op.dim)
    for j in range(op.dim):
        unit[j] = 1.0
        columns[:, j] = op.matvec(unit)
        unit[j] = 0.0
    deviation = float(np.max(np.abs(columns - columns.T)))
    scale = max(float(np.max(np.abs(columns))), 1.0)
    if deviation > MATVEC_SYMMETRY_RTOL * scale:
        raise SymmetryError(f"operator matvecs are not symmetric (max deviation {deviation:.3e})")
    return DenseOperator(0.5 * (columns + columns.T))


def load_matrix_market(path: Path | str) -> SparseOperator:
    """Read a coordinate-format symmetric Matrix Market file into CSR.

    A symmetric header stores one triangle; both are materialised.
    """
    path = Path(path)
    with logfire.span("load matrix market {path}", path=str(path)):
        try:
            _, _, _, fmt, _, _ = scipy.io.mminfo(path)
            if fmt != "coordinate":
                raise MatrixMarketError(f"{path}: expected coordinate format, found {fmt}")
            matrix = scipy.io.mmread(path)
        except MatrixMarketError:
            raise
        except (ValueError, IndexError, TypeError, EOFError) as exc:
            raise MatrixMarketError(f"{path}: {exc}") from exc
        return SparseOperator(sp.csr_array(matrix))


def five_point_laplacian(m: int) -> sp.csr_array:
    """Five-point Dirichlet Laplacian on the m x m interior grid (unscaled)."""
    second_difference = sp.diags_array([-np.ones(m - 1), 2.0 * np.ones(m), -np.ones(m - 1)], offsets=[-1, 0, 1])
    eye = sp.eye_array(m)
    return sp.csr_array(sp.kron(eye, second_difference) + sp.kron(second_difference, eye))


def rw2_gallery(m: int) -> SparseOperator:
    """Second-order random walk precision (s^2 A)^2 with s = m + 1."""
    scaled = (m + 1) ** 2 * five_point_laplacian(m)
    return SparseOperator(scaled @ scaled)


__all__ = [
    "DENSE_DIMENSION_CAP",
    "LinearOperator",
    "BlockCirculantOperator",
    "SparseOperator",
    "DiagonalOperator",
    "SumOperator",
    "DenseOperator",
    "identity_operator",
    "to_dense",
    "checked_real",
    "load_matrix_market",
    "torus_laplacian_eigenvalues",
    "torus_precision_base",
    "canonical_prior",
    "five_point_laplacian",
    "rw2_gallery",
]
