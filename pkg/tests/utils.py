import numpy as np
import scipy.linalg


def random_spd(n: int, rng: np.random.Generator, log_condition: float = 2.0) -> np.ndarray:
    """Random SPD matrix with eigenvalues log-spaced over 10**log_condition."""
    basis, _ = np.linalg.qr(rng.standard_normal((n, n)))
    eigenvalues = np.logspace(0.0, log_condition, n)
    matrix = (basis * eigenvalues) @ basis.T
    return 0.5 * (matrix + matrix.T)


def tridiagonal(n: int, diagonal: float, off: float) -> np.ndarray:
    return diagonal * np.eye(n) + off * (np.eye(n, k=1) + np.eye(n, k=-1))


def inverse_sqrt(matrix: np.ndarray) -> np.ndarray:
    eigenvalues, vectors = np.linalg.eigh(matrix)
    return (vectors / np.sqrt(eigenvalues)) @ vectors.T


def dense_log(matrix: np.ndarray) -> np.ndarray:
    eigenvalues, vectors = np.linalg.eigh(matrix)
    return (vectors * np.log(eigenvalues)) @ vectors.T


def logdet(matrix: np.ndarray) -> float:
    sign, value = np.linalg.slogdet(matrix)
    assert sign > 0
    return float(value)


def dense_block_circulant(base: np.ndarray) -> np.ndarray:
    """Explicit block-circulant matrix whose first column is `base` (row-major)."""
    base = np.atleast_2d(base) if base.ndim == 2 else base.reshape(-1, 1)
    n1, n2 = base.shape
    matrix = np.empty((n1 * n2, n1 * n2))
    for a in range(n1):
        for b in range(n2):
            matrix[:, a * n2 + b] = np.roll(base, shift=(a, b), axis=(0, 1)).ravel()
    return matrix


def dense_from_map(apply, n: int) -> np.ndarray:
    """Columns apply(e_j) of a linear map that need not be symmetric."""
    columns = np.empty((n, n))
    for j in range(n):
        unit = np.zeros(n)
        unit[j] = 1.0
        columns[:, j] = apply(unit)
    return columns


def frobenius_relative(estimate: np.ndarray, target: np.ndarray) -> float:
    return float(np.linalg.norm(estimate - target) / np.linalg.norm(target))


def second_moment(samples: np.ndarray) -> np.ndarray:
    """Covariance estimate for zero-mean samples stacked by row."""
    return samples.T @ samples / samples.shape[0]


def gaussian_logpdf(x: np.ndarray, mean: np.ndarray, precision: np.ndarray) -> float:
    """log N(x; mean, precision^-1) from a dense Cholesky factor."""
    factor = scipy.linalg.cholesky(precision, lower=True)
    diff = x - mean
    return float(
        -0.5 * x.size * np.log(2.0 * np.pi)
        + np.sum(np.log(np.diag(factor)))
        - 0.5 * diff @ precision @ diff
    )


def posterior_marginal(
    Q: np.ndarray,
    y: np.ndarray,
    log_intensity_offset: float,
    centres: np.ndarray,
    others: np.ndarray,
) -> np.ndarray:
    """Marginal of x_0 under exp(-x'Qx/2 + sum y (c + x) - exp(c + x)) on midpoint grids.

    Only meant for n = 4: the remaining three coordinates are integrated over
    the tensor grid `others`.
    """
    rest = np.stack(np.meshgrid(others, others, others, indexing="ij"), axis=-1).reshape(-1, 3)
    log_density = np.empty(centres.size)
    for k, value in enumerate(centres):
        points = np.column_stack([np.full(rest.shape[0], value), rest])
        eta = log_intensity_offset + points
        log_terms = -0.5 * np.einsum("ij,jk,ik->i", points, Q, points) + (y * eta - np.exp(eta)).sum(axis=1)
        peak = log_terms.max()
        log_density[k] = peak + np.log(np.exp(log_terms - peak).sum())
    density = np.exp(log_density - log_density.max())
    return density / density.sum()
