"""Discretised log-Gaussian Cox process on the unit torus.

Counts y_ij ~ Poisson(h^2 exp(mu + x_ij)) given a latent field x ~ N(0, Q^-1)
with Q block circulant. Samplers for x | y: symmetric random walk, MALA
with the prior as metric, and simplified manifold MALA with metric Q + H(x),
H the (diagonal) Fisher information of the Poisson likelihood.
"""

import math

from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Callable, List, Literal, Optional, Tuple

import logfire
import numpy as np
import pandas as pd
import scipy.linalg

from gmrf_sampler.errors import DimensionMismatchError, DivergentStateError, NonFiniteInputError, NotSPDError
from gmrf_sampler.krylov import SamplerOptions, cg_solve
from gmrf_sampler.logdet import LogDetOptions, preconditioned_logdet
from gmrf_sampler.operators import (
    DENSE_DIMENSION_CAP,
    BlockCirculantOperator,
    DiagonalOperator,
    LinearOperator,
    SumOperator,
    to_dense,
)
from gmrf_sampler.precond import (
    CirculantShiftPreconditioner,
    PreconditionedOperator,
    build_circulant_shift,
    lambda_min_shifted_inner,
    preconditioned_sample,
)
from gmrf_sampler.utils import random_stream, read_grid_csv, write_grid_csv


OVERFLOW_EXPONENT = 700.0
TARGET_ACCEPTANCE = 0.574

ProposerName = Literal["rw", "mala", "smmala"]


@dataclass(frozen=True)
class TorusLattice:
    n1: int
    n2: int

    def __post_init__(self):
        if self.n1 != self.n2:
            raise ValueError(f"cells must be square: n1 = {self.n1}, n2 = {self.n2}")
        if self.n1 < 2:
            raise ValueError(f"lattice needs at least 2 cells per side, got {self.n1}")

    @classmethod
    def square(cls, n: int) -> "TorusLattice":
        return cls(n, n)

    @property
    def grid(self) -> Tuple[int, int]:
        return (self.n1, self.n2)

    @property
    def dim(self) -> int:
        return self.n1 * self.n2

    @property
    def h(self) -> float:
        return 1.0 / self.n1

    @property
    def cell_area(self) -> float:
        return self.h**2


@dataclass
class PointPattern:
    """Points in [0, 1)^2; coordinates are wrapped onto the torus on ingest."""

    points: np.ndarray = field(default_factory=lambda: np.empty((0, 2)))

    def __post_init__(self):
        points = np.asarray(self.points, dtype=float).reshape(-1, 2)
        points = np.mod(points, 1.0)
        # np.mod can round a tiny negative up to exactly 1.0
        points[points >= 1.0] = 0.0
        self.points = points

    def __len__(self) -> int:
        return int(self.points.shape[0])

    def to_csv(self, path: Path | str) -> None:
        pd.DataFrame(self.points, columns=["x", "y"]).to_csv(path, index=False)

    @classmethod
    def from_csv(cls, path: Path | str) -> "PointPattern":
        frame = pd.read_csv(path)
        return cls(frame[["x", "y"]].to_numpy(dtype=float))


@dataclass
class LatticeCounts:
    y: np.ndarray

    def __post_init__(self):
        y = np.asarray(self.y)
        if y.ndim != 2:
            raise ValueError("counts must be a 2-D grid")
        if np.any(y < 0) or np.any(y != np.round(y)):
            raise ValueError("counts must be non-negative integers")
        self.y = y.astype(np.int64)

    @property
    def total(self) -> int:
        return int(self.y.sum())

    def to_csv(self, path: Path | str) -> None:
        write_grid_csv(path, self.y)

    @classmethod
    def from_csv(cls, path: Path | str) -> "LatticeCounts":
        return cls(np.rint(read_grid_csv(path)))


def bin_points(pattern: PointPattern, lattice: TorusLattice) -> LatticeCounts:
    """Count points per cell; cell (i, j) holds floor(s / h) == (i, j)."""
    counts = np.zeros(lattice.grid, dtype=np.int64)
    if len(pattern):
        cells = np.floor(pattern.points / lattice.h).astype(np.int64)
        cells = np.clip(cells, 0, lattice.n1 - 1)
        np.add.at(counts, (cells[:, 0], cells[:, 1]), 1)
    return LatticeCounts(counts)


@dataclass
class LgcpModel:
    lattice: TorusLattice
    prior: BlockCirculantOperator
    counts: LatticeCounts
    mu: float = 0.0

    def __post_init__(self):
        if self.prior.dim != self.lattice.dim or self.prior.grid != self.lattice.grid:
            raise DimensionMismatchError(
                f"prior grid {self.prior.grid} does not match lattice {self.lattice.grid}"
            )
        if self.counts.y.shape != self.lattice.grid:
            raise DimensionMismatchError(
                f"counts grid {self.counts.y.shape} does not match lattice {self.lattice.grid}"
            )

    @property
    def dim(self) -> int:
        return self.lattice.dim

    @property
    def y(self) -> np.ndarray:
        return self.counts.y.ravel().astype(float)

    @cached_property
    def prior_spectrum(self) -> np.ndarray:
        return self.prior.spectrum()

    @cached_property
    def prior_logdet(self) -> float:
        return float(np.sum(np.log(self.prior_spectrum)))

    @cached_property
    def dense_prior(self) -> np.ndarray:
        return to_dense(self.prior).matrix

    def intensity(self, x: np.ndarray) -> np.ndarray:
        """Expected count per cell, h^2 exp(mu + x); guarded against overflow."""
        eta = self.mu + np.asarray(x, dtype=float)
        limit = OVERFLOW_EXPONENT - 2.0 * math.log(self.lattice.h)
        if np.any(eta > limit):
            raise DivergentStateError(
                f"latent field reached {float(np.max(eta)):.1f} > {limit:.1f}; exp would overflow"
            )
        return self.lattice.cell_area * np.exp(eta)


def loglik_grad_fisher(model: LgcpModel, x: np.ndarray) -> Tuple[float, np.ndarray, DiagonalOperator]:
    """Poisson log-likelihood, its gradient and the Fisher information.

    The x-independent terms y log h^2 and log y! are dropped.
    """
    x = model.prior.check_vector(x)
    intensity = model.intensity(x)
    y = model.y
    loglik = float(y @ (model.mu + x) - intensity.sum())
    return loglik, y - intensity, DiagonalOperator(intensity)


def log_posterior(model: LgcpModel, x: np.ndarray) -> float:
    """-x^T Q x / 2 + log-likelihood, up to a constant."""
    loglik, _, _ = loglik_grad_fisher(model, x)
    return -0.5 * float(x @ model.prior.matvec(x)) + loglik


@dataclass
class ChainState:
    x: np.ndarray
    log_posterior: float
    grad: np.ndarray
    intensity: np.ndarray
    step_size: float
    rng: np.random.Generator
    iteration: int = 0
    accepted: int = 0
    proposed: int = 0

    @classmethod
    def start(cls, model: LgcpModel, x: np.ndarray, step_size: float, rng: np.random.Generator) -> "ChainState":
        x = np.array(x, dtype=float)
        loglik, grad, H = loglik_grad_fisher(model, x)
        lp = -0.5 * float(x @ model.prior.matvec(x)) + loglik
        return cls(x=x, log_posterior=lp, grad=grad, intensity=H.diag.copy(), step_size=step_size, rng=rng)

    def move_to(self, model: LgcpModel, x: np.ndarray) -> None:
        loglik, grad, H = loglik_grad_fisher(model, x)
        self.x = np.array(x, dtype=float)
        self.log_posterior = -0.5 * float(self.x @ model.prior.matvec(self.x)) + loglik
        self.grad = grad
        self.intensity = H.diag.copy()

    @property
    def acceptance_rate(self) -> float:
        return self.accepted / self.proposed if self.proposed else 0.0


@dataclass
class Proposal:
    x: np.ndarray
    log_forward: float
    log_reverse: float
    ok: bool = True
    flag: str = ""
    inner_iterations: int = 0
    cg_iterations: int = 0
    ffts: int = 0
    exact: bool = True

    @classmethod
    def aborted(cls, x: np.ndarray, flag: str, **counters) -> "Proposal":
        return cls(x=x, log_forward=0.0, log_reverse=0.0, ok=False, flag=flag, **counters)


def _gaussian_logpdf(G: LinearOperator, logdet_G: float, diff: np.ndarray, step_size: float) -> float:
    """log N(diff; 0, step^2 G^-1)."""
    n = diff.size
    return (
        -0.5 * n * math.log(2.0 * math.pi * step_size**2)
        + 0.5 * logdet_G
        - 0.5 * float(diff @ G.matvec(diff)) / step_size**2
    )


def rw_propose(model: LgcpModel, state: ChainState) -> Proposal:
    """Symmetric random walk x + delta xi; both transition log-densities cancel."""
    if state.step_size == 0.0:
        return Proposal(state.x.copy(), 0.0, 0.0)
    return Proposal(state.x + state.step_size * state.rng.standard_normal(model.dim), 0.0, 0.0)


def mala_propose(model: LgcpModel, state: ChainState) -> Proposal:
    """x* ~ N(x + (delta^2/2) Q^-1 grad, delta^2 Q^-1), all by spectral filtering."""
    delta = state.step_size
    if delta == 0.0:
        return Proposal(state.x.copy(), 0.0, 0.0)
    Q = model.prior

    def _mean(x: np.ndarray, grad: np.ndarray) -> np.ndarray:
        return x + 0.5 * delta**2 * Q.apply_power(grad, -1.0)

    mean = _mean(state.x, state.grad)
    proposal = mean + delta * Q.apply_power(state.rng.standard_normal(model.dim), -0.5)
    try:
        _, grad_star, _ = loglik_grad_fisher(model, proposal)
    except DivergentStateError:
        return Proposal.aborted(proposal, "divergent", ffts=4)
    log_forward = _gaussian_logpdf(Q, model.prior_logdet, proposal - mean, delta)
    log_reverse = _gaussian_logpdf(Q, model.prior_logdet, state.x - _mean(proposal, grad_star), delta)
    return Proposal(proposal, log_forward, log_reverse, ffts=10)


@dataclass
class SmmalaOptions:
    alpha: float = 0.0
    tolerance: float = 1e-8
    max_iterations: int = 500
    logdet_probes: int = 10
    exact_logdet_cap: int = DENSE_DIMENSION_CAP

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")
        if self.tolerance <= 0 or self.max_iterations < 1 or self.logdet_probes < 1:
            raise ValueError("tolerance, max_iterations and logdet_probes must be positive")
        if self.exact_logdet_cap > DENSE_DIMENSION_CAP:
            raise ValueError(f"exact_logdet_cap cannot exceed {DENSE_DIMENSION_CAP}")


def metric(model: LgcpModel, intensity: np.ndarray) -> SumOperator:
    """G = Q + H with H = diag(intensity)."""
    return SumOperator([model.prior, DiagonalOperator(intensity)])


def _metric_logdet(
    model: LgcpModel,
    G: SumOperator,
    intensity: np.ndarray,
    P: CirculantShiftPreconditioner,
    options: SmmalaOptions,
    crn_seed: int,
) -> Tuple[float, bool]:
    if model.dim <= options.exact_logdet_cap:
        dense = model.dense_prior + np.diag(intensity)
        try:
            factor, _ = scipy.linalg.cho_factor(dense, lower=True)
        except scipy.linalg.LinAlgError as exc:
            raise NotSPDError(f"metric is not SPD: {exc}") from exc
        return 2.0 * float(np.sum(np.log(np.diag(factor)))), True
    estimate = preconditioned_logdet(G, P, options.logdet_probes, LogDetOptions(seed=crn_seed))
    return estimate.estimate, False


def smmala_propose(
    model: LgcpModel,
    state: ChainState,
    precond: Optional[CirculantShiftPreconditioner] = None,
    options: Optional[SmmalaOptions] = None,
) -> Proposal:
    """x* ~ N(x + (delta^2/2) G(x)^-1 grad, delta^2 G(x)^-1), G = Q + H(x).

    The mean comes from preconditioned CG and the noise from the
    preconditioned Lanczos sampler. The reverse density re-evaluates G at
    x*. Above `exact_logdet_cap` the log det G difference is estimated with
    common random numbers and the proposal is marked inexact.
    """
    options = options or SmmalaOptions()
    delta = state.step_size
    if delta == 0.0:
        return Proposal(state.x.copy(), 0.0, 0.0)
    P = precond or build_circulant_shift(model.prior, options.alpha)
    crn_seed = int(state.rng.integers(2**32))

    def _moments(x: np.ndarray, grad: np.ndarray, intensity: np.ndarray):
        G = metric(model, intensity)
        solve = cg_solve(G, grad, M=P, tol=options.tolerance, maxit=options.max_iterations)
        return G, x + 0.5 * delta**2 * solve.x, solve

    G, mean, solve = _moments(state.x, state.grad, state.intensity)
    sampler = SamplerOptions(
        max_iterations=options.max_iterations,
        tolerance=options.tolerance,
        lambda_min=lambda_min_shifted_inner(model.prior, float(np.min(state.intensity)), P.alpha),
    )
    noise, report = preconditioned_sample(G, P, sampler, z=state.rng.standard_normal(model.dim))
    counters = dict(
        inner_iterations=report.iterations,
        cg_iterations=solve.iterations,
        ffts=report.iterations * PreconditionedOperator(G, P).ffts_per_matvec,
    )
    if not (solve.converged and report.converged):
        return Proposal.aborted(mean, "nonconvergence", **counters)
    proposal = mean + delta * noise

    try:
        _, grad_star, H_star = loglik_grad_fisher(model, proposal)
        G_star, mean_star, solve_star = _moments(proposal, grad_star, H_star.diag)
    except (DivergentStateError, NonFiniteInputError):
        # intensities near the overflow guard can still overflow inside CG
        return Proposal.aborted(proposal, "divergent", **counters)
    counters["cg_iterations"] += solve_star.iterations
    if not solve_star.converged:
        return Proposal.aborted(proposal, "nonconvergence", **counters)

    logdet, exact = _metric_logdet(model, G, state.intensity, P, options, crn_seed)
    logdet_star, _ = _metric_logdet(model, G_star, H_star.diag, P, options, crn_seed)
    return Proposal(
        proposal,
        log_forward=_gaussian_logpdf(G, logdet, proposal - mean, delta),
        log_reverse=_gaussian_logpdf(G_star, logdet_star, state.x - mean_star, delta),
        exact=exact,
        **counters,
    )


class DualAveraging:
    """Step-size adaptation towards a target acceptance probability."""

    def __init__(self, step_size: float, target: float = TARGET_ACCEPTANCE,
                 gamma: float = 0.05, t0: float = 10.0, kappa: float = 0.75):
        if step_size <= 0:
            raise ValueError("dual averaging needs a positive initial step size")
        self.target = target
        self.gamma = gamma
        self.t0 = t0
        self.kappa = kappa
        self.mu = math.log(10.0 * step_size)
        self.log_step = math.log(step_size)
        self.log_step_bar = 0.0
        self.h_bar = 0.0
        self.t = 0

    def update(self, accept_probability: float) -> float:
        self.t += 1
        eta = 1.0 / (self.t + self.t0)
        self.h_bar = (1.0 - eta) * self.h_bar + eta * (self.target - accept_probability)
        self.log_step = self.mu - math.sqrt(self.t) / self.gamma * self.h_bar
        weight = self.t ** (-self.kappa)
        self.log_step_bar = weight * self.log_step + (1.0 - weight) * self.log_step_bar
        return math.exp(self.log_step)

    @property
    def final_step(self) -> float:
        return math.exp(self.log_step_bar)


@dataclass
class ChainOptions:
    thin: int = 10
    warmup: int = 0
    adapt: bool = False
    target_acceptance: float = TARGET_ACCEPTANCE
    chain_id: int = 0
    smmala: SmmalaOptions = field(default_factory=SmmalaOptions)

    def __post_init__(self):
        if self.thin < 1:
            raise ValueError("thin must be at least 1")
        if self.warmup < 0:
            raise ValueError("warmup must be non-negative")
        if not 0.0 < self.target_acceptance < 1.0:
            raise ValueError("target_acceptance must lie in (0, 1)")


@dataclass
class ChainResult:
    log_posterior: np.ndarray
    accepted: np.ndarray
    inner_iterations: np.ndarray
    ffts: np.ndarray
    step_sizes: np.ndarray
    flags: List[str]
    samples: np.ndarray
    sample_iterations: np.ndarray
    posterior_mean: np.ndarray
    warmup: int
    exact: bool
    final_state: ChainState

    @property
    def iterations(self) -> int:
        return int(self.accepted.size)

    @property
    def acceptance_rate(self) -> float:
        kept = self.accepted[self.warmup:]
        return float(np.mean(kept)) if kept.size else 0.0

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            {
                "iteration": np.arange(1, self.iterations + 1),
                "accepted": self.accepted.astype(int),
                "log_posterior": self.log_posterior,
                "inner_iterations": self.inner_iterations,
                "ffts": self.ffts,
                "step_size": self.step_sizes,
                "flag": self.flags,
            }
        )

    def states_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame(self.samples, columns=[f"x{i}" for i in range(self.samples.shape[1])])
        frame.insert(0, "iteration", self.sample_iterations)
        return frame


def _proposer(name: ProposerName, options: ChainOptions, model: LgcpModel) -> Callable[[LgcpModel, ChainState], Proposal]:
    if name == "rw":
        return rw_propose
    if name == "mala":
        return mala_propose
    if name == "smmala":
        P = build_circulant_shift(model.prior, options.smmala.alpha)
        return lambda m, s: smmala_propose(m, s, P, options.smmala)
    raise ValueError(f"unknown proposer {name!r}")


def mh_chain(
    model: LgcpModel,
    proposer: ProposerName,
    iterations: int,
    step_size: float,
    seed: int = 0,
    options: Optional[ChainOptions] = None,
    x0: Optional[np.ndarray] = None,
) -> ChainResult:
    """Metropolis-Hastings on x | y with the chosen proposal.

    The log acceptance ratio is the change in log posterior plus reverse
    minus forward proposal log-density. Aborted proposals (divergence or
    inner non-convergence) count as rejections and carry a flag. With
    `adapt`, the step size is tuned by dual averaging during the warm-up
    and then frozen; acceptance and the posterior mean use post-warm-up
    iterations only.
    """
    if iterations < 1:
        raise ValueError("iterations must be at least 1")
    if step_size < 0:
        raise ValueError("step size must be non-negative")
    options = options or ChainOptions()
    propose = _proposer(proposer, options, model)
    rng = random_stream(seed, options.chain_id)
    state = ChainState.start(model, np.zeros(model.dim) if x0 is None else x0, step_size, rng)
    adapter = DualAveraging(step_size, options.target_acceptance) if options.adapt and step_size > 0 else None

    log_posts = np.empty(iterations)
    accepted = np.zeros(iterations, dtype=bool)
    inner = np.zeros(iterations, dtype=int)
    ffts = np.zeros(iterations, dtype=int)
    steps = np.empty(iterations)
    flags: List[str] = []
    samples, sample_iterations = [], []
    running_sum = np.zeros(model.dim)
    exact = True

    with logfire.span("mh chain {proposer} n={n} iterations={iterations}",
                      proposer=proposer, n=model.dim, iterations=iterations):
        for it in range(iterations):
            steps[it] = state.step_size
            proposal = propose(model, state)
            exact = exact and proposal.exact
            accept_probability = 0.0
            if proposal.ok:
                try:
                    target = log_posterior(model, proposal.x)
                except DivergentStateError:
                    proposal.ok, proposal.flag = False, "divergent"
                else:
                    log_ratio = target - state.log_posterior + proposal.log_reverse - proposal.log_forward
                    accept_probability = math.exp(min(0.0, log_ratio)) if not math.isnan(log_ratio) else 0.0
                    if state.rng.random() < accept_probability:
                        state.move_to(model, proposal.x)
                        state.accepted += 1
                        accepted[it] = True
            state.proposed += 1
            state.iteration += 1

            if adapter is not None and it < options.warmup:
                state.step_size = adapter.update(accept_probability)
                if it == options.warmup - 1:
                    state.step_size = adapter.final_step
                    logfire.info("adapted step size {step}", step=state.step_size)

            log_posts[it] = state.log_posterior
            inner[it] = proposal.inner_iterations
            ffts[it] = proposal.ffts
            flags.append(proposal.flag)
            if it >= options.warmup:
                running_sum += state.x
                if (it - options.warmup) % options.thin == 0:
                    samples.append(state.x.copy())
                    sample_iterations.append(it + 1)

        kept = max(iterations - options.warmup, 0)
        result = ChainResult(
            log_posterior=log_posts,
            accepted=accepted,
            inner_iterations=inner,
            ffts=ffts,
            step_sizes=steps,
            flags=flags,
            samples=np.array(samples).reshape(-1, model.dim),
            sample_iterations=np.array(sample_iterations, dtype=int),
            posterior_mean=running_sum / kept if kept else state.x.copy(),
            warmup=options.warmup,
            exact=exact,
            final_state=state,
        )
        logfire.info("acceptance rate {rate}", rate=result.acceptance_rate)
        if not exact:
            logfire.warn("chain used stochastic log-determinants and is inexact")
        return result


def trace_diagnostic(model: LgcpModel, x: np.ndarray, alpha: float) -> float:
    """tr((Q + alpha I)^-1 (H - alpha I)) for circulant Q.

    Every diagonal entry of the circulant inverse equals mean(1 / (lambda_k + alpha)).
    """
    shifted = model.prior.eigenvalues + alpha
    if np.any(shifted <= 0.0):
        raise NotSPDError("Q + alpha I is not positive definite", index=int(np.argmin(shifted)))
    diagonal_entry = float(np.mean(1.0 / shifted))
    return diagonal_entry * float(np.sum(model.intensity(x) - alpha))


def simulate_lgcp(
    lattice: TorusLattice,
    Q: BlockCirculantOperator,
    seed: int,
    mu: float = 0.0,
    latent: Optional[np.ndarray] = None,
) -> Tuple[np.ndarray, PointPattern]:
    """Draw x ~ N(0, Q^-1) exactly, then Poisson counts scattered uniformly within cells.

    Passing `latent` skips the Gaussian draw and uses it as x.
    """
    if Q.grid != lattice.grid:
        raise DimensionMismatchError(f"prior grid {Q.grid} does not match lattice {lattice.grid}")
    rng = random_stream(seed)
    with logfire.span("simulate lgcp grid={grid}", grid=lattice.grid):
        if latent is None:
            x = Q.apply_power(rng.standard_normal(lattice.dim), -0.5)
        else:
            x = Q.check_vector(latent).copy()
        eta = mu + x
        if np.any(eta > OVERFLOW_EXPONENT - 2.0 * math.log(lattice.h)):
            raise DivergentStateError("simulated field overflows the intensity")
        counts = rng.poisson(lattice.cell_area * np.exp(eta))
        cells = np.repeat(np.arange(lattice.dim), counts)
        rows, cols = np.divmod(cells, lattice.n2)
        offsets = rng.random((cells.size, 2))
        points = np.column_stack([rows + offsets[:, 0], cols + offsets[:, 1]]) * lattice.h
        logfire.info("simulated {k} points", k=int(cells.size))
        return x, PointPattern(points)


__all__ = [
    "TorusLattice",
    "PointPattern",
    "LatticeCounts",
    "LgcpModel",
    "ChainState",
    "Proposal",
    "SmmalaOptions",
    "ChainOptions",
    "ChainResult",
    "DualAveraging",
    "bin_points",
    "loglik_grad_fisher",
    "log_posterior",
    "metric",
    "rw_propose",
    "mala_propose",
    "smmala_propose",
    "mh_chain",
    "trace_diagnostic",
    "simulate_lgcp",
]
