"""Factored preconditioners M = F F^T and the preconditioned sampler.

If u ~ N(0, (F^-1 Q F^-T)^-1) then the solution of F^T x = u is N(0, Q^-1),
so the Lanczos sampler runs on the well-conditioned F^-1 Q F^-T and a
triangular or spectral solve maps the result back.
"""

import enum
import heapq
import math

from abc import ABC, abstractmethod
from typing import Dict, FrozenSet, List, Optional, Tuple

import logfire
import numpy as np
import scipy.fft
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg

from gmrf_sampler.errors import (
    FactorizationBreakdownError,
    MissingCapabilityError,
    NotSPDError,
)
from gmrf_sampler.krylov import ConvergenceReport, SamplerOptions, lanczos_sample
from gmrf_sampler.operators import (
    BlockCirculantOperator,
    DiagonalOperator,
    LinearOperator,
    SparseOperator,
    SumOperator,
    checked_real,
    to_dense,
)


ICT_RETRY_SHIFT = 1e-2


class Capability(enum.Enum):
    APPLY_F_INV = "apply_f_inv"
    APPLY_F_T_INV = "apply_f_t_inv"
    SOLVE_F_T = "solve_f_t"
    SAMPLE = "sample"
    LOGDET = "logdet"


ALL_CAPABILITIES: FrozenSet[Capability] = frozenset(Capability)


class FactoredPreconditioner(ABC):
    """M = F F^T over a fixed dimension, advertising what it can do."""

    ffts_per_application: int = 0

    def __init__(self, dim: int, capabilities: FrozenSet[Capability] = ALL_CAPABILITIES):
        if Capability.SAMPLE in capabilities and Capability.LOGDET not in capabilities:
            raise ValueError("a preconditioner that samples must also expose logdet F")
        self._dim = int(dim)
        self._capabilities = frozenset(capabilities)

    @property
    def dim(self) -> int:
        return self._dim

    @property
    def capabilities(self) -> FrozenSet[Capability]:
        return self._capabilities

    def require(self, *needed: Capability) -> None:
        missing = [c.value for c in needed if c not in self._capabilities]
        if missing:
            raise MissingCapabilityError(
                f"{type(self).__name__} lacks capabilities: {', '.join(missing)}"
            )

    @abstractmethod
    def apply_f(self, w: np.ndarray) -> np.ndarray: ...

    @abstractmethod
    def apply_f_inv(self, w: np.ndarray) -> np.ndarray: ...

    @abstractmethod
    def apply_f_t_inv(self, w: np.ndarray) -> np.ndarray: ...

    def solve_f_t(self, u: np.ndarray) -> np.ndarray:
        """x with F^T x = u."""
        self.require(Capability.SOLVE_F_T)
        return self.apply_f_t_inv(u)

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        """One draw from N(0, M^-1) = F^-T z, z white noise."""
        self.require(Capability.SAMPLE)
        return self.apply_f_t_inv(rng.standard_normal(self._dim))

    @abstractmethod
    def logdet_f(self) -> float: ...


class IdentityPreconditioner(FactoredPreconditioner):
    def apply_f(self, w: np.ndarray) -> np.ndarray:
        return np.array(w, dtype=float)

    def apply_f_inv(self, w: np.ndarray) -> np.ndarray:
        return np.array(w, dtype=float)

    def apply_f_t_inv(self, w: np.ndarray) -> np.ndarray:
        return np.array(w, dtype=float)

    def logdet_f(self) -> float:
        return 0.0


def identity_preconditioner(n: int) -> IdentityPreconditioner:
    if n < 1:
        raise ValueError("dimension must be at least 1")
    return IdentityPreconditioner(n)


class CirculantShiftPreconditioner(FactoredPreconditioner):
    """M = Q + alpha I for block-circulant Q; F is circulant with spectrum sqrt(lambda + alpha)."""

    ffts_per_application = 2

    def __init__(self, Q: BlockCirculantOperator, alpha: float = 0.0):
        if alpha < 0:
            raise ValueError(f"alpha must be non-negative, got {alpha}")
        shifted = Q.eigenvalues + alpha
        if np.any(shifted <= 0.0):
            index = int(np.argmin(shifted))
            raise NotSPDError(
                f"shifted spectrum is not positive: {shifted[index]:.3e} at index {index}",
                index=index,
            )
        super().__init__(Q.dim)
        self.Q = Q
        self.alpha = float(alpha)
        self.shifted_spectrum = shifted
        self.factor_spectrum = np.sqrt(shifted)

    def apply_f(self, w: np.ndarray) -> np.ndarray:
        return self.Q.apply_spectral(w, self.factor_spectrum)

    def apply_f_inv(self, w: np.ndarray) -> np.ndarray:
        return self.Q.apply_spectral(w, 1.0 / self.factor_spectrum)

    def apply_f_t_inv(self, w: np.ndarray) -> np.ndarray:
        # F is symmetric
        return self.apply_f_inv(w)

    def logdet_f(self) -> float:
        return 0.5 * float(np.sum(np.log(self.shifted_spectrum)))


def build_circulant_shift(Q: BlockCirculantOperator, alpha: float = 0.0) -> CirculantShiftPreconditioner:
    with logfire.span("build circulant shift n={n} alpha={alpha}", n=Q.dim, alpha=alpha):
        return CirculantShiftPreconditioner(Q, alpha)


def _with_cint_indices(matrix):
    # scipy<1.16 spsolve_triangular requires 32-bit index arrays.
    if matrix.nnz < np.iinfo(np.int32).max:
        matrix.indices = matrix.indices.astype(np.int32, copy=False)
        matrix.indptr = matrix.indptr.astype(np.int32, copy=False)
    return matrix


class TriangularPreconditioner(FactoredPreconditioner):
    """F sparse lower triangular with positive diagonal; solves by substitution."""

    def __init__(self, factor):
        factor = sp.csr_array(factor, dtype=float)
        diagonal = factor.diagonal()
        if np.any(diagonal <= 0.0):
            index = int(np.argmin(diagonal))
            raise NotSPDError(f"factor diagonal {index} is {diagonal[index]:.3e}", index=index)
        super().__init__(factor.shape[0])
        self.factor = _with_cint_indices(factor)
        self._factor_t = _with_cint_indices(sp.csr_array(factor.T))

    def apply_f(self, w: np.ndarray) -> np.ndarray:
        return self.factor @ np.asarray(w, dtype=float)

    def apply_f_inv(self, w: np.ndarray) -> np.ndarray:
        return scipy.sparse.linalg.spsolve_triangular(self.factor, np.asarray(w, dtype=float), lower=True)

    def apply_f_t_inv(self, w: np.ndarray) -> np.ndarray:
        return scipy.sparse.linalg.spsolve_triangular(self._factor_t, np.asarray(w, dtype=float), lower=False)

    def logdet_f(self) -> float:
        return float(np.sum(np.log(self.factor.diagonal())))


class IncompleteCholeskyPreconditioner(TriangularPreconditioner):
    def __init__(self, factor, drop_tol: float, shift: float = 0.0, dropped: int = 0):
        super().__init__(factor)
        self.drop_tol = float(drop_tol)
        self.shift = float(shift)
        self.dropped = int(dropped)

    @property
    def pattern(self) -> Tuple[np.ndarray, np.ndarray]:
        """(row, column) indices of the retained entries."""
        coo = self.factor.tocoo()
        return coo.row.copy(), coo.col.copy()


def _ict_factor(matrix: sp.csr_array, drop_tol: float) -> Tuple[sp.csr_array, int]:
    """Row-by-row threshold incomplete Cholesky.

    Row i of L is eliminated left to right against the already finished
    columns. An off-diagonal entry is dropped when its updated value before
    division by the pivot, Q_ik - sum_j l_ij l_kj, is below drop_tol ||Q_i||
    in magnitude; both sides scale with Q, so the pattern does not depend on
    the overall scale of Q. Raises FactorizationBreakdownError on a
    non-positive pivot.
    """
    n = matrix.shape[0]
    indptr, indices, data = matrix.indptr, matrix.indices, matrix.data
    diagonal = np.empty(n)
    columns: List[List[Tuple[int, float]]] = [[] for _ in range(n)]
    rows, cols, values = [], [], []
    dropped = 0

    for i in range(n):
        start, end = indptr[i], indptr[i + 1]
        row_cols, row_vals = indices[start:end], data[start:end]
        threshold = drop_tol * float(np.linalg.norm(row_vals))
        work: Dict[int, float] = {}
        for j, value in zip(row_cols, row_vals):
            if j <= i:
                work[int(j)] = float(value)
        work.setdefault(i, 0.0)
        heap = [j for j in work if j < i]
        heapq.heapify(heap)
        kept: List[Tuple[int, float]] = []

        while heap:
            k = heapq.heappop(heap)
            value = work.pop(k)
            if abs(value) < threshold:
                dropped += 1
                continue
            l_ik = value / diagonal[k]
            kept.append((k, l_ik))
            for j, l_jk in columns[k]:
                if j not in work:
                    work[j] = 0.0
                    heapq.heappush(heap, j)
                work[j] -= l_ik * l_jk
            work[i] -= l_ik * l_ik

        pivot = work[i]
        if not pivot > 0.0:
            raise FactorizationBreakdownError(f"non-positive pivot {pivot:.3e} in row {i}", row=i)
        diagonal[i] = math.sqrt(pivot)
        for k, l_ik in kept:
            columns[k].append((i, l_ik))
            rows.append(i)
            cols.append(k)
            values.append(l_ik)

    rows.extend(range(n))
    cols.extend(range(n))
    values.extend(diagonal.tolist())
    factor = sp.csr_array(sp.coo_array((values, (rows, cols)), shape=(n, n)))
    factor.sort_indices()
    return factor, dropped


def build_ict(Q: SparseOperator, drop_tol: float) -> IncompleteCholeskyPreconditioner:
    """Threshold incomplete Cholesky; drop_tol = 0 gives the exact factor.

    On pivot breakdown the factorisation is retried once on
    Q + 1e-2 mean(diag Q) I.
    """
    if drop_tol < 0:
        raise ValueError(f"drop_tol must be non-negative, got {drop_tol}")
    matrix = Q.matrix
    with logfire.span("build ict n={n} drop_tol={drop_tol}", n=Q.dim, drop_tol=drop_tol):
        shift = 0.0
        try:
            factor, dropped = _ict_factor(matrix, drop_tol)
        except FactorizationBreakdownError as exc:
            shift = ICT_RETRY_SHIFT * float(np.mean(Q.diagonal()))
            logfire.warn(
                "ict breakdown at row {row}; retrying with diagonal shift {shift}",
                row=exc.row, shift=shift,
            )
            shifted = sp.csr_array(matrix + shift * sp.eye_array(Q.dim, format="csr"))
            factor, dropped = _ict_factor(shifted, drop_tol)
        logfire.info("ict factor has {nnz} entries, {dropped} dropped", nnz=factor.nnz, dropped=dropped)
        return IncompleteCholeskyPreconditioner(factor, drop_tol, shift=shift, dropped=dropped)


class DenseCholeskyPreconditioner(FactoredPreconditioner):
    """Exact Cholesky factor of a small operator; the perfect preconditioner."""

    def __init__(self, M: LinearOperator):
        dense = to_dense(M).matrix
        try:
            self.factor = scipy.linalg.cholesky(dense, lower=True)
        except scipy.linalg.LinAlgError as exc:
            raise NotSPDError(f"dense Cholesky failed: {exc}") from exc
        super().__init__(M.dim)

    def apply_f(self, w: np.ndarray) -> np.ndarray:
        return self.factor @ np.asarray(w, dtype=float)

    def apply_f_inv(self, w: np.ndarray) -> np.ndarray:
        return scipy.linalg.solve_triangular(self.factor, w, lower=True)

    def apply_f_t_inv(self, w: np.ndarray) -> np.ndarray:
        return scipy.linalg.solve_triangular(self.factor, w, lower=True, trans="T")

    def logdet_f(self) -> float:
        return float(np.sum(np.log(np.diag(self.factor))))


def dense_cholesky_preconditioner(M: LinearOperator) -> DenseCholeskyPreconditioner:
    return DenseCholeskyPreconditioner(M)


class PreconditionedOperator(LinearOperator):
    """F^-1 Q F^-T, applied implicitly.

    When Q is c Q_circ + D (any number of diagonal terms) and F is the
    circulant-shift factor of Q_circ, the product needs four FFTs instead of
    the six of the generic F^-T, Q, F^-1 chain.
    """

    def __init__(self, Q: LinearOperator, P: FactoredPreconditioner):
        if Q.dim != P.dim:
            raise ValueError(f"operator dimension {Q.dim} differs from preconditioner {P.dim}")
        P.require(Capability.APPLY_F_INV, Capability.APPLY_F_T_INV)
        super().__init__(Q.dim)
        self.Q = Q
        self.P = P
        self._fused = _fused_terms(Q, P)
        if self._fused is None:
            self.ffts_per_matvec = Q.ffts_per_matvec + 2 * P.ffts_per_application
        else:
            self.ffts_per_matvec = 2 if self._fused[1] is None else 4

    @property
    def fused(self) -> bool:
        return self._fused is not None

    def _matvec(self, v: np.ndarray) -> np.ndarray:
        if self._fused is not None:
            return self._fused_matvec(v)
        return self.P.apply_f_inv(self.Q.matvec(self.P.apply_f_t_inv(v)))

    def _fused_matvec(self, v: np.ndarray) -> np.ndarray:
        circulant_multiplier, diagonal = self._fused
        P: CirculantShiftPreconditioner = self.P
        grid = P.Q.grid
        s = P.factor_spectrum.reshape(grid)
        transformed = scipy.fft.fft2(v.reshape(grid))
        combined = circulant_multiplier.reshape(grid) * transformed
        scale = float(np.linalg.norm(v)) * max(float(np.max(np.abs(circulant_multiplier))), 1.0)
        if diagonal is not None:
            w_scale = float(np.linalg.norm(v)) * max(1.0 / float(np.min(s)), 1.0)
            w = checked_real(scipy.fft.ifft2(transformed / s), w_scale).reshape(grid)
            combined = combined + scipy.fft.fft2(diagonal.reshape(grid) * w) / s
            scale += float(np.linalg.norm(v)) * float(np.max(np.abs(diagonal))) / float(np.min(s)) ** 2
        return checked_real(scipy.fft.ifft2(combined), scale)


def _fused_terms(
    Q: LinearOperator, P: FactoredPreconditioner
) -> Optional[Tuple[np.ndarray, Optional[np.ndarray]]]:
    """(c lambda / s^2, summed diagonal) if Q fits the fused pattern for P, else None."""
    if not isinstance(P, CirculantShiftPreconditioner):
        return None
    if isinstance(Q, BlockCirculantOperator):
        parts, weights = (Q,), (1.0,)
    elif isinstance(Q, SumOperator):
        parts, weights = Q.operators, Q.weights
    else:
        return None

    circulant_weight = 0.0
    circulant = None
    diagonal = None
    for op, weight in zip(parts, weights):
        if isinstance(op, BlockCirculantOperator):
            if circulant is not None or op.grid != P.Q.grid or not np.array_equal(op.eigenvalues, P.Q.eigenvalues):
                return None
            circulant, circulant_weight = op, weight
        elif isinstance(op, DiagonalOperator):
            term = weight * op.diag
            diagonal = term if diagonal is None else diagonal + term
        else:
            return None
    if circulant is None:
        return None
    return circulant_weight * circulant.eigenvalues / P.shifted_spectrum, diagonal


def preconditioned_sample(
    Q: LinearOperator,
    P: FactoredPreconditioner,
    options: Optional[SamplerOptions] = None,
    z: Optional[np.ndarray] = None,
) -> Tuple[np.ndarray, ConvergenceReport]:
    """Sample N(0, Q^-1) by Lanczos on F^-1 Q F^-T followed by F^T x = u."""
    P.require(Capability.APPLY_F_INV, Capability.APPLY_F_T_INV, Capability.SOLVE_F_T)
    op = PreconditionedOperator(Q, P)
    with logfire.span("preconditioned sample n={n}", n=Q.dim, preconditioner=type(P).__name__):
        u, report = lanczos_sample(op, z, options)
        return P.solve_f_t(u), report


def lambda_min_plus_diagonal(Q: BlockCirculantOperator, diagonal_min: float) -> float:
    """Lower bound lambda_min(Q) + min(D) for lambda_min(Q + D)."""
    return Q.lambda_min + float(diagonal_min)


def lambda_min_shifted_inner(Q: BlockCirculantOperator, diagonal_min: float, alpha: float) -> float:
    """Lower bound for lambda_min of F^-1 (Q + D) F^-T with F F^T = Q + alpha I.

    D >= diagonal_min I gives F^-1 (Q + D) F^-T >= F^-1 (Q + diagonal_min I) F^-T,
    a circulant with spectrum (lambda_k + diagonal_min) / (lambda_k + alpha).
    """
    spectrum = Q.eigenvalues
    return float(np.min((spectrum + diagonal_min) / (spectrum + alpha)))


__all__ = [
    "Capability",
    "FactoredPreconditioner",
    "IdentityPreconditioner",
    "CirculantShiftPreconditioner",
    "TriangularPreconditioner",
    "IncompleteCholeskyPreconditioner",
    "DenseCholeskyPreconditioner",
    "PreconditionedOperator",
    "identity_preconditioner",
    "build_circulant_shift",
    "build_ict",
    "dense_cholesky_preconditioner",
    "preconditioned_sample",
    "lambda_min_plus_diagonal",
    "lambda_min_shifted_inner",
]
