"""Lanczos sampling of N(0, Q^-1), conjugate gradients and Lanczos quadrature.

The sampler returns x_m = ||z|| V_m T_m^{-1/2} e_1. Its stopping rule is the
a-posteriori bound ||x - x_m|| <= lambda_min^{-1/2} ||r_m||, where r_m is the
residual of conjugate gradients on Qy = z. CG and Lanczos started from the
same z span the same Krylov space, so ||r_m|| is read off the Lanczos
coefficients: ||r_m|| = ||z|| prod_{j<=m} beta_j / delta_j, with delta_j the
LDL^T pivots of T_m.
"""

import math

from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, List, Literal, Optional, Tuple

import logfire
import numpy as np
import pandas as pd
import scipy.linalg

from gmrf_sampler.errors import NotSPDError
from gmrf_sampler.operators import LinearOperator
from gmrf_sampler.utils import random_stream

if TYPE_CHECKING:
    from gmrf_sampler.precond import FactoredPreconditioner


BREAKDOWN_RTOL = 1e-12
_LOG_EVERY = 500
EIGH_SIZE_LIMIT = 1500
_QUADRATURE_STEP = 0.25
_QUADRATURE_TAIL = 36.0


@dataclass
class SamplerOptions:
    max_iterations: int = 1000
    tolerance: float = 1e-8
    reorthogonalize: Literal["full", "none"] = "full"
    # None means: smallest Ritz value of the current T_m
    lambda_min: Optional[float] = None
    seed: int = 0
    check_every: int = 1

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be at least 1")
        if self.tolerance <= 0:
            raise ValueError("tolerance must be positive")
        if self.reorthogonalize not in ("full", "none"):
            raise ValueError("reorthogonalize must be 'full' or 'none'")
        if self.lambda_min is not None and self.lambda_min <= 0:
            raise ValueError("lambda_min must be positive")
        if self.check_every < 1:
            raise ValueError("check_every must be at least 1")


@dataclass
class QuadratureOptions:
    rtol: float = 1e-7
    max_iterations: Optional[int] = None
    reorthogonalize: bool = True

    def __post_init__(self):
        if self.rtol <= 0:
            raise ValueError("rtol must be positive")
        if self.max_iterations is not None and self.max_iterations < 1:
            raise ValueError("max_iterations must be at least 1")


@dataclass
class ConvergenceReport:
    """Per-iteration a-posteriori error bounds of one sampler run."""

    bounds: np.ndarray
    lambda_min: float
    lambda_min_source: Literal["user", "ritz"]
    tolerance: float
    iterations: int
    converged: bool
    alphas: np.ndarray = field(default_factory=lambda: np.empty(0))
    betas: np.ndarray = field(default_factory=lambda: np.empty(0))
    exact_termination: bool = False

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            {
                "iteration": np.arange(1, self.iterations + 1),
                "bound": self.bounds,
                "alpha": self.alphas,
                "beta": self.betas,
            }
        )

    def to_csv(self, path: Path | str) -> None:
        self.to_frame().to_csv(path, index=False)


@dataclass
class LanczosState:
    """Coefficients (and optionally the basis) after m Lanczos steps.

    `betas` has length m: beta_1..beta_{m-1} are the off-diagonals of T_m and
    beta_m is the norm of the trailing residual vector.
    """

    alphas: np.ndarray
    betas: np.ndarray
    znorm: float
    basis: Optional[np.ndarray] = None

    @property
    def iterations(self) -> int:
        return int(self.alphas.size)

    def tridiagonal(self, m: Optional[int] = None) -> np.ndarray:
        m = self.iterations if m is None else m
        off = self.betas[: m - 1]
        return np.diag(self.alphas[:m]) + np.diag(off, 1) + np.diag(off, -1)

    def inverse_sqrt_coefficients(self, m: Optional[int] = None) -> np.ndarray:
        """||z|| T_m^{-1/2} e_1; quadrature replaces the eigendecomposition for long runs."""
        m = self.iterations if m is None else m
        return self.znorm * tridiagonal_inverse_sqrt_e1(self.alphas[:m], self.betas[: m - 1])

    def sample(self, m: Optional[int] = None) -> np.ndarray:
        """The iterate x_m; needs the stored basis."""
        if self.basis is None:
            raise ValueError("basis was not stored; use the two-pass path")
        m = self.iterations if m is None else m
        return self.basis[:m].T @ self.inverse_sqrt_coefficients(m)

    def orthogonality_error(self) -> float:
        if self.basis is None:
            raise ValueError("basis was not stored")
        gram = self.basis @ self.basis.T
        return float(np.max(np.abs(gram - np.eye(gram.shape[0]))))


class _Basis:
    """Row-wise growable store for Lanczos vectors."""

    def __init__(self, n: int, capacity: int = 32):
        self._rows = np.empty((min(capacity, max(n, 1)), n))
        self._count = 0

    def append(self, v: np.ndarray) -> None:
        if self._count == self._rows.shape[0]:
            grown = np.empty((2 * self._rows.shape[0], self._rows.shape[1]))
            grown[: self._count] = self._rows[: self._count]
            self._rows = grown
        self._rows[self._count] = v
        self._count += 1

    def view(self) -> np.ndarray:
        return self._rows[: self._count]


class LanczosRecurrence:
    """The symmetric Lanczos three-term recurrence, one step at a time."""

    def __init__(
        self,
        op: LinearOperator,
        start: np.ndarray,
        *,
        reorthogonalize: bool = True,
        keep_basis: bool = True,
    ):
        start = op.check_vector(start)
        norm = float(np.linalg.norm(start))
        if norm == 0.0:
            raise ValueError("Lanczos needs a non-zero starting vector")
        self._op = op
        self._reorthogonalize = reorthogonalize
        self._v = start / norm
        self._v_prev = np.zeros_like(self._v)
        self._beta_prev = 0.0
        self._scale = 0.0
        self._basis = _Basis(op.dim) if (keep_basis or reorthogonalize) else None
        if self._basis is not None:
            self._basis.append(self._v)
        self.norm = norm
        self.alphas: List[float] = []
        self.betas: List[float] = []
        self.exhausted = False

    @property
    def iterations(self) -> int:
        return len(self.alphas)

    def step(self) -> Tuple[float, float]:
        if self.exhausted:
            raise RuntimeError("Krylov space is exhausted")
        q = self._op.matvec(self._v)
        if self.alphas:
            q = q - self._beta_prev * self._v_prev
        alpha = float(self._v @ q)
        q = q - alpha * self._v
        if self._reorthogonalize:
            basis = self._basis.view()
            for _ in range(2):
                q = q - basis.T @ (basis @ q)
        beta = float(np.linalg.norm(q))
        self._scale = max(self._scale, abs(alpha), self._beta_prev)
        self.alphas.append(alpha)
        self.betas.append(beta)

        if beta <= BREAKDOWN_RTOL * self._scale or len(self.alphas) >= self._op.dim:
            self.exhausted = True
        else:
            self._v_prev = self._v
            self._v = q / beta
            self._beta_prev = beta
            if self._basis is not None:
                self._basis.append(self._v)
        return alpha, beta

    def basis(self) -> Optional[np.ndarray]:
        if self._basis is None:
            return None
        return self._basis.view()[: self.iterations].copy()

    def state(self) -> LanczosState:
        return LanczosState(
            alphas=np.array(self.alphas),
            betas=np.array(self.betas),
            znorm=self.norm,
            basis=self.basis(),
        )


def _tridiagonal_eigh(alphas: np.ndarray, off: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    if alphas.size == 1:
        return np.array([alphas[0]]), np.ones((1, 1))
    try:
        return scipy.linalg.eigh_tridiagonal(alphas, off)
    except scipy.linalg.LinAlgError:
        # stemr can fail on clusters of near-equal Ritz values from unreorthogonalised runs
        logfire.warn("stemr failed on a tridiagonal of size {m}; retrying with stev", m=int(alphas.size))
        return scipy.linalg.eigh_tridiagonal(alphas, off, lapack_driver="stev")


def _extreme_ritz_values(alphas: np.ndarray, off: np.ndarray) -> Tuple[float, float]:
    m = alphas.size
    lo = scipy.linalg.eigvalsh_tridiagonal(alphas, off, select="i", select_range=(0, 0))
    hi = scipy.linalg.eigvalsh_tridiagonal(alphas, off, select="i", select_range=(m - 1, m - 1))
    return float(lo[0]), float(hi[0])


def tridiagonal_inverse_sqrt_e1(
    alphas: np.ndarray,
    off: np.ndarray,
    method: Literal["auto", "eigh", "quadrature"] = "auto",
) -> np.ndarray:
    """T^{-1/2} e_1 for the SPD tridiagonal T = tridiag(off, alphas, off).

    "eigh" diagonalises T and needs O(m^2) memory. "quadrature" applies the
    trapezoidal rule to T^{-1/2} = (2/pi) int_R e^s (T + e^{2s} I)^{-1} ds,
    one banded solve per node, in O(m) memory. "auto" uses eigh up to
    EIGH_SIZE_LIMIT.
    """
    alphas = np.asarray(alphas, dtype=float)
    off = np.asarray(off, dtype=float)
    m = alphas.size
    if method == "auto":
        method = "eigh" if m <= EIGH_SIZE_LIMIT else "quadrature"

    if method == "eigh":
        theta, vectors = _tridiagonal_eigh(alphas, off)
        if theta[0] <= 0.0:
            raise NotSPDError(f"non-positive Ritz value {theta[0]:.3e} at size {m}", index=0)
        return vectors @ (vectors[0, :] / np.sqrt(theta))
    if method != "quadrature":
        raise ValueError(f"unknown method {method!r}")

    if m == 1:
        if alphas[0] <= 0.0:
            raise NotSPDError(f"non-positive Ritz value {alphas[0]:.3e} at size 1", index=0)
        return np.array([1.0 / math.sqrt(alphas[0])])
    lo, hi = _extreme_ritz_values(alphas, off)
    if lo <= 0.0:
        raise NotSPDError(f"non-positive Ritz value {lo:.3e} at size {m}", index=0)
    nodes = np.arange(
        0.5 * math.log(lo) - _QUADRATURE_TAIL,
        0.5 * math.log(hi) + _QUADRATURE_TAIL + _QUADRATURE_STEP,
        _QUADRATURE_STEP,
    )
    banded = np.zeros((2, m))
    banded[0, 1:] = off
    e1 = np.zeros(m)
    e1[0] = 1.0
    result = np.zeros(m)
    for s in nodes:
        banded[1] = alphas + math.exp(2.0 * s)
        result += math.exp(s) * scipy.linalg.solveh_banded(banded, e1)
    return (2.0 / math.pi) * _QUADRATURE_STEP * result


def _smallest_ritz_value(alphas: List[float], betas: List[float]) -> float:
    if len(alphas) == 1:
        return alphas[0]
    values = scipy.linalg.eigvalsh_tridiagonal(
        np.asarray(alphas), np.asarray(betas[:-1]), select="i", select_range=(0, 0)
    )
    return float(values[0])


def _replay(op: LinearOperator, start: np.ndarray, state: LanczosState, coefficients: np.ndarray) -> np.ndarray:
    """Second pass: regenerate v_1..v_m from stored coefficients and sum Σ c_j v_j."""
    v = start / state.znorm
    v_prev = np.zeros_like(v)
    result = coefficients[0] * v
    for j in range(1, state.iterations):
        q = op.matvec(v)
        if j > 1:
            q = q - state.betas[j - 2] * v_prev
        q = q - state.alphas[j - 1] * v
        v_prev, v = v, q / state.betas[j - 1]
        result = result + coefficients[j] * v
    return result


def _partial_report(
    recurrence: LanczosRecurrence,
    bounds: List[float],
    lambda_min: Optional[float],
    source: Literal["user", "ritz"],
    tolerance: float,
) -> ConvergenceReport:
    """Diagnostics of the iterations completed before a failure."""
    done = len(bounds)
    return ConvergenceReport(
        bounds=np.array(bounds),
        lambda_min=math.nan if lambda_min is None else float(lambda_min),
        lambda_min_source=source,
        tolerance=tolerance,
        iterations=done,
        converged=False,
        alphas=np.array(recurrence.alphas[:done]),
        betas=np.array(recurrence.betas[:done]),
    )


def run_lanczos_sampler(
    Q: LinearOperator,
    z: Optional[np.ndarray] = None,
    options: Optional[SamplerOptions] = None,
) -> Tuple[np.ndarray, ConvergenceReport, LanczosState]:
    """Lanczos sampler returning the sample, its report and the final state."""
    options = options or SamplerOptions()
    if z is None:
        z = random_stream(options.seed).standard_normal(Q.dim)
    z = Q.check_vector(z)
    znorm = float(np.linalg.norm(z))
    source = "ritz" if options.lambda_min is None else "user"

    if znorm == 0.0:
        report = ConvergenceReport(
            bounds=np.empty(0), lambda_min=options.lambda_min or math.nan,
            lambda_min_source=source, tolerance=options.tolerance, iterations=0, converged=True,
        )
        return np.zeros(Q.dim), report, LanczosState(np.empty(0), np.empty(0), 0.0, None)

    full = options.reorthogonalize == "full"
    with logfire.span("lanczos sample n={n}", n=Q.dim, reorthogonalize=options.reorthogonalize):
        recurrence = LanczosRecurrence(Q, z, reorthogonalize=full, keep_basis=full)
        bounds: List[float] = []
        residual = znorm
        pivot = 0.0
        lambda_min = options.lambda_min
        converged = False

        for m in range(1, options.max_iterations + 1):
            alpha, beta = recurrence.step()
            pivot = alpha if m == 1 else alpha - recurrence.betas[-2] ** 2 / pivot
            try:
                if pivot <= 0.0:
                    raise NotSPDError(f"non-positive pivot {pivot:.3e} at iteration {m}", index=m - 1)
                if options.lambda_min is None:
                    lambda_min = _smallest_ritz_value(recurrence.alphas, recurrence.betas)
                    if lambda_min <= 0.0:
                        raise NotSPDError(f"negative Ritz value {lambda_min:.3e} at iteration {m}", index=m - 1)
            except NotSPDError as exc:
                exc.report = _partial_report(recurrence, bounds, lambda_min, source, options.tolerance)
                raise
            residual *= beta / pivot
            bounds.append(residual / math.sqrt(lambda_min))

            if m % _LOG_EVERY == 0:
                logfire.debug("lanczos iteration {m}: bound {bound}", m=m, bound=bounds[-1])
            if recurrence.exhausted:
                converged = True
                break
            if m % options.check_every == 0 and bounds[-1] < options.tolerance:
                converged = True
                break

        state = recurrence.state()
        if full:
            x = state.sample()
        else:
            x = _replay(Q, z, state, state.inverse_sqrt_coefficients())

        report = ConvergenceReport(
            bounds=np.array(bounds),
            lambda_min=float(lambda_min),
            lambda_min_source=source,
            tolerance=options.tolerance,
            iterations=state.iterations,
            converged=converged,
            alphas=state.alphas,
            betas=state.betas,
            exact_termination=recurrence.exhausted,
        )
        if not converged:
            logfire.warn(
                "lanczos sampler stopped at {m} iterations with bound {bound}",
                m=state.iterations, bound=bounds[-1],
            )
        return x, report, state


def lanczos_sample(
    Q: LinearOperator,
    z: Optional[np.ndarray] = None,
    options: Optional[SamplerOptions] = None,
) -> Tuple[np.ndarray, ConvergenceReport]:
    """Approximate sample from N(0, Q^-1) and its convergence report.

    If `z` is omitted it is drawn from the seeded stream `options.seed`.
    """
    x, report, _ = run_lanczos_sampler(Q, z, options)
    return x, report


@dataclass
class CGResult:
    x: np.ndarray
    residual_norms: np.ndarray
    iterations: int
    converged: bool


def cg_solve(
    Q: LinearOperator,
    b: np.ndarray,
    M: Optional["FactoredPreconditioner"] = None,
    tol: float = 1e-8,
    maxit: Optional[int] = None,
) -> CGResult:
    """(Preconditioned) conjugate gradients for Qx = b.

    With a factored preconditioner M = F F^T this is CG on the symmetrically
    preconditioned system, written in the usual PCG form with
    M^-1 r = F^-T F^-1 r. Success means ||Qx - b|| <= tol ||b||.
    """
    b = Q.check_vector(b)
    maxit = 10 * Q.dim if maxit is None else maxit
    norm_b = float(np.linalg.norm(b))
    x = np.zeros(Q.dim)
    if norm_b == 0.0:
        return CGResult(x=x, residual_norms=np.zeros(1), iterations=0, converged=True)

    def _precondition(r: np.ndarray) -> np.ndarray:
        if M is None:
            return r
        return M.apply_f_t_inv(M.apply_f_inv(r))

    r = b.copy()
    s = _precondition(r)
    p = s.copy()
    gamma = float(r @ s)
    history = [norm_b]
    converged = False
    iterations = 0
    with logfire.span("cg solve n={n}", n=Q.dim, preconditioned=M is not None):
        while iterations < maxit:
            qp = Q.matvec(p)
            curvature = float(p @ qp)
            if curvature <= 0.0:
                raise NotSPDError(f"non-positive curvature {curvature:.3e} in CG", index=iterations)
            step = gamma / curvature
            x = x + step * p
            r = r - step * qp
            iterations += 1
            history.append(float(np.linalg.norm(r)))
            if history[-1] <= tol * norm_b:
                converged = True
                break
            s = _precondition(r)
            gamma_next = float(r @ s)
            p = s + (gamma_next / gamma) * p
            gamma = gamma_next
        if not converged:
            logfire.warn("cg stopped at {maxit} iterations, relative residual {rel}",
                         maxit=maxit, rel=history[-1] / norm_b)
    return CGResult(x=x, residual_norms=np.array(history), iterations=iterations, converged=converged)


def apriori_bound(kappa: float, lambda_min: float, m: int, znorm: float) -> float:
    """2 lambda_min^{-1/2} sqrt(kappa) ((sqrt(kappa)-1)/(sqrt(kappa)+1))^m ||z||."""
    if not kappa >= 1.0:
        raise ValueError(f"kappa must be >= 1, got {kappa}")
    if not lambda_min > 0.0:
        raise ValueError(f"lambda_min must be positive, got {lambda_min}")
    if m < 0:
        raise ValueError(f"m must be non-negative, got {m}")
    if znorm < 0:
        raise ValueError(f"znorm must be non-negative, got {znorm}")
    root = math.sqrt(kappa)
    return 2.0 / math.sqrt(lambda_min) * root * ((root - 1.0) / (root + 1.0)) ** m * znorm


def lanczos_quadrature_logform(
    Q: LinearOperator, v: np.ndarray, options: Optional[QuadratureOptions] = None
) -> float:
    """v^T log(Q) v ≈ ||v||^2 e_1^T log(T_m) e_1.

    Stops once the estimate changes by at most rtol (relative) on two
    consecutive iterations, or when the Krylov space is exhausted.
    """
    options = options or QuadratureOptions()
    v = Q.check_vector(v)
    norm2 = float(v @ v)
    if norm2 == 0.0:
        raise ValueError("quadratic form needs a non-zero vector")
    max_iterations = options.max_iterations or Q.dim
    recurrence = LanczosRecurrence(
        Q, v, reorthogonalize=options.reorthogonalize, keep_basis=False
    )
    estimate = previous = math.nan
    settled = 0
    for m in range(1, max_iterations + 1):
        recurrence.step()
        theta, vectors = _tridiagonal_eigh(
            np.asarray(recurrence.alphas), np.asarray(recurrence.betas[:-1])
        )
        if theta[0] <= 0.0:
            raise NotSPDError(f"non-positive Ritz value {theta[0]:.3e}; log undefined", index=m - 1)
        estimate = norm2 * float(vectors[0, :] ** 2 @ np.log(theta))
        if recurrence.exhausted:
            break
        if m > 1 and abs(estimate - previous) <= options.rtol * abs(estimate):
            settled += 1
            if settled >= 2:
                break
        else:
            settled = 0
        previous = estimate
    return estimate


__all__ = [
    "SamplerOptions",
    "QuadratureOptions",
    "ConvergenceReport",
    "LanczosState",
    "LanczosRecurrence",
    "CGResult",
    "run_lanczos_sampler",
    "lanczos_sample",
    "cg_solve",
    "apriori_bound",
    "lanczos_quadrature_logform",
    "tridiagonal_inverse_sqrt_e1",
]
