"""Command-line front end: sample, bench-precond, logdet, lgcp-mcmc, simulate.

Exit status is 0 on success, 1 on any library or configuration error and 2
when a Krylov run stops before reaching its tolerance. Every subcommand
writes its CSV files before returning, including on non-convergence.
"""

import argparse
import os
import sys
import time

from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Sequence

import dotenv
import logfire
import numpy as np
import pandas as pd
import scipy.sparse as sp

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from gmrf_sampler.errors import GmrfError, MissingCapabilityError, NotSPDError
from gmrf_sampler.krylov import SamplerOptions, lanczos_sample
from gmrf_sampler.lgcp import (
    ChainOptions,
    LatticeCounts,
    LgcpModel,
    PointPattern,
    SmmalaOptions,
    TorusLattice,
    bin_points,
    mh_chain,
    simulate_lgcp,
)
from gmrf_sampler.logdet import (
    LogDetOptions,
    colour_graph,
    coloured_hutchinson_logdet,
    hutchinson_logdet,
    preconditioned_logdet,
)
from gmrf_sampler.operators import (
    BlockCirculantOperator,
    DiagonalOperator,
    LinearOperator,
    SparseOperator,
    SumOperator,
    canonical_prior,
    load_matrix_market,
    rw2_gallery,
)
from gmrf_sampler.precond import (
    FactoredPreconditioner,
    PreconditionedOperator,
    build_circulant_shift,
    build_ict,
    lambda_min_plus_diagonal,
    lambda_min_shifted_inner,
    preconditioned_sample,
)
from gmrf_sampler.utils import map_in_threads, random_stream, write_grid_csv, write_vector_csv


EXIT_OK = 0
EXIT_ERROR = 1
EXIT_NOT_CONVERGED = 2

ENV_DEFAULTS = {
    "out_dir": "GMRF_OUT_DIR",
    "threads": "GMRF_THREADS",
    "seed": "GMRF_SEED",
}


def _split_list(value: Any) -> Any:
    if isinstance(value, str):
        return [item.strip() for item in value.split(",") if item.strip()]
    return value


class RunConfig(BaseModel):
    """Validated settings of one CLI invocation; unknown keys are rejected."""

    model_config = ConfigDict(extra="forbid")

    command: Literal["sample", "bench-precond", "logdet", "lgcp-mcmc", "simulate"]
    seed: int = 0
    out_dir: Path = Path("out")
    tol: float = Field(default=1e-8, gt=0)
    maxit: int = Field(default=1000, ge=1)
    threads: int = Field(default=1, ge=1)

    matrix: str = "grid:32"
    tau: float = Field(default=1.0, gt=0)
    kappa: float = Field(default=10.0, ge=0)
    nu: int = 2

    precond: Literal["none", "circulant", "ict"] = "none"
    alpha: float = Field(default=0.0, ge=0)
    drop_tol: float = Field(default=1e-3, ge=0)
    reorth: Literal["full", "none"] = "full"
    lambda_min: Optional[float] = Field(default=None, gt=0)

    grids: List[int] = Field(default_factory=lambda: [16, 32, 64, 128])
    mu: float = 0.0

    probes: int = Field(default=100, ge=1)
    colour_powers: List[int] = Field(default_factory=lambda: [0])

    grid: int = Field(default=32, ge=2)
    proposer: Literal["rw", "mala", "smmala"] = "smmala"
    iterations: int = Field(default=1000, ge=1)
    step_size: float = Field(default=0.1, ge=0)
    warmup: int = Field(default=0, ge=0)
    thin: int = Field(default=10, ge=1)
    points: Optional[Path] = None
    counts: Optional[Path] = None

    @field_validator("nu")
    @classmethod
    def _check_nu(cls, value: int) -> int:
        if value not in (1, 2):
            raise ValueError("nu must be 1 or 2")
        return value

    @field_validator("grids", "colour_powers", mode="before")
    @classmethod
    def _comma_list(cls, value: Any) -> Any:
        return _split_list(value)

    @field_validator("grids")
    @classmethod
    def _check_grids(cls, value: List[int]) -> List[int]:
        if not value or any(n < 2 for n in value):
            raise ValueError("grid sizes must be at least 2")
        return value

    @field_validator("colour_powers")
    @classmethod
    def _check_powers(cls, value: List[int]) -> List[int]:
        if not value or any(p < 0 for p in value):
            raise ValueError("colour powers must be non-negative (0 = uncoloured)")
        return value

    @model_validator(mode="after")
    def _check_matrix(self) -> "RunConfig":
        kind, _, size = self.matrix.partition(":")
        if kind in ("grid", "rw2", "identity"):
            if not size.isdigit() or int(size) < 1:
                raise ValueError(f"matrix spec {self.matrix!r} needs a positive size")
        elif not self.matrix.endswith(".mtx"):
            raise ValueError(f"matrix must be grid:N, rw2:M, identity:N or a .mtx path, got {self.matrix!r}")
        return self


class BenchRecord(BaseModel):
    grid: int
    method: Literal["none", "circulant"]
    iterations: int = Field(ge=0)
    converged: bool
    matvecs: int = Field(ge=0)
    ffts: int = Field(ge=0)
    wall_time: float = Field(ge=0)

    @model_validator(mode="after")
    def _converged_has_iterations(self) -> "BenchRecord":
        if self.converged and self.iterations < 1:
            raise ValueError("a converged run takes at least one iteration")
        return self

    def table_row(self) -> Dict[str, Any]:
        return {
            "grid": self.grid,
            "method": self.method,
            "iterations": self.iterations if self.converged else "-",
            "matvecs": self.matvecs,
            "ffts": self.ffts,
        }


def build_operator(config: RunConfig) -> LinearOperator:
    kind, _, size = config.matrix.partition(":")
    if kind == "grid":
        return canonical_prior(int(size), tau=config.tau, kappa=config.kappa, nu=config.nu)
    if kind == "rw2":
        return rw2_gallery(int(size))
    if kind == "identity":
        return SparseOperator(sp.eye_array(int(size), format="csr"))
    return load_matrix_market(config.matrix)


def build_preconditioner(config: RunConfig, Q: LinearOperator) -> Optional[FactoredPreconditioner]:
    if config.precond == "none":
        return None
    if config.precond == "circulant":
        if not isinstance(Q, BlockCirculantOperator):
            raise MissingCapabilityError("the circulant preconditioner needs a grid:N operator")
        return build_circulant_shift(Q, config.alpha)
    if not isinstance(Q, SparseOperator):
        raise MissingCapabilityError("the ict preconditioner needs a sparse operator")
    return build_ict(Q, config.drop_tol)


def _sampler_options(config: RunConfig, **overrides) -> SamplerOptions:
    values = dict(
        max_iterations=config.maxit,
        tolerance=config.tol,
        reorthogonalize=config.reorth,
        lambda_min=config.lambda_min,
        seed=config.seed,
    )
    values.update(overrides)
    return SamplerOptions(**values)


def cmd_sample(config: RunConfig) -> int:
    Q = build_operator(config)
    P = build_preconditioner(config, Q)
    options = _sampler_options(config)
    try:
        if P is None:
            x, report = lanczos_sample(Q, None, options)
        else:
            x, report = preconditioned_sample(Q, P, options)
    except NotSPDError as exc:
        if exc.report is not None:
            exc.report.to_csv(config.out_dir / "convergence.csv")
        raise
    write_vector_csv(config.out_dir / "sample.csv", x, column="x")
    report.to_csv(config.out_dir / "convergence.csv")
    logfire.info("sample: {m} iterations, converged={converged}", m=report.iterations, converged=report.converged)
    return EXIT_OK if report.converged else EXIT_NOT_CONVERGED


def smmala_operator(Q: BlockCirculantOperator, mu: float) -> SumOperator:
    """Q + H with H the Fisher information at x = 0, i.e. h^2 exp(mu) I."""
    h = 1.0 / Q.grid[0]
    return SumOperator([Q, DiagonalOperator(np.full(Q.dim, h**2 * np.exp(mu)))])


def _bench_grid(config: RunConfig, n: int) -> List[BenchRecord]:
    Q = canonical_prior(n, tau=config.tau, kappa=config.kappa, nu=config.nu)
    G = smmala_operator(Q, config.mu)
    diagonal_min = float(np.min(G.operators[1].diag))
    z = random_stream(config.seed, n).standard_normal(Q.dim)
    records = []

    with logfire.span("bench grid {n}", n=n):
        started = time.perf_counter()
        _, report = lanczos_sample(
            G, z, _sampler_options(config, reorthogonalize="none",
                                   lambda_min=lambda_min_plus_diagonal(Q, diagonal_min)),
        )
        matvecs = 2 * report.iterations - 1
        records.append(BenchRecord(
            grid=n, method="none", iterations=report.iterations, converged=report.converged,
            matvecs=matvecs, ffts=matvecs * G.ffts_per_matvec,
            wall_time=time.perf_counter() - started,
        ))

        started = time.perf_counter()
        P = build_circulant_shift(Q, config.alpha)
        _, report = preconditioned_sample(
            G, P, _sampler_options(config, lambda_min=lambda_min_shifted_inner(Q, diagonal_min, config.alpha)), z=z,
        )
        inner = PreconditionedOperator(G, P)
        records.append(BenchRecord(
            grid=n, method="circulant", iterations=report.iterations, converged=report.converged,
            matvecs=report.iterations,
            ffts=report.iterations * inner.ffts_per_matvec + P.ffts_per_application,
            wall_time=time.perf_counter() - started,
        ))
    return records


def cmd_bench_precond(config: RunConfig) -> List[BenchRecord]:
    """Iterations to tolerance per grid, with and without circulant-shift preconditioning.

    bench.csv is a deterministic function of the configuration; wall times
    go to bench_timing.csv.
    """
    per_grid = map_in_threads(lambda n: _bench_grid(config, n), config.grids, threads=config.threads)
    records = [record for group in per_grid for record in group]
    pd.DataFrame([r.table_row() for r in records]).to_csv(config.out_dir / "bench.csv", index=False)
    pd.DataFrame(
        [{"grid": r.grid, "method": r.method, "wall_time": r.wall_time} for r in records]
    ).to_csv(config.out_dir / "bench_timing.csv", index=False)
    return records


def cmd_logdet(config: RunConfig) -> int:
    Q = build_operator(config)
    P = build_preconditioner(config, Q)
    options = LogDetOptions(seed=config.seed, threads=config.threads)
    frames, summaries = [], []
    for power in config.colour_powers:
        probes = None
        if power > 0:
            if not isinstance(Q, SparseOperator):
                raise MissingCapabilityError("colouring needs a sparse operator")
            probes = colour_graph(Q, power)
        if P is not None:
            estimate = preconditioned_logdet(Q, P, config.probes, options, probes=probes)
        elif probes is not None:
            estimate = coloured_hutchinson_logdet(Q, probes, config.probes, options)
        else:
            estimate = hutchinson_logdet(Q, config.probes, options)
        frame = estimate.to_frame()[["probe", "value"]]
        frame.insert(0, "power", power)
        frames.append(frame)
        summaries.append({"power": power, **estimate.summary()})
    pd.concat(frames, ignore_index=True).to_csv(config.out_dir / "probes.csv", index=False)
    pd.DataFrame(summaries).to_csv(config.out_dir / "logdet_summary.csv", index=False)
    return EXIT_OK


def _lgcp_data(config: RunConfig, lattice: TorusLattice, Q: BlockCirculantOperator) -> LatticeCounts:
    if config.counts is not None:
        return LatticeCounts.from_csv(config.counts)
    if config.points is not None:
        return bin_points(PointPattern.from_csv(config.points), lattice)
    _, pattern = simulate_lgcp(lattice, Q, config.seed, mu=config.mu)
    return bin_points(pattern, lattice)


def cmd_lgcp(config: RunConfig) -> int:
    if config.precond != "none":
        raise ValueError("lgcp-mcmc always preconditions with the circulant shift; set --alpha instead of --precond")
    lattice = TorusLattice.square(config.grid)
    Q = canonical_prior(config.grid, tau=config.tau, kappa=config.kappa, nu=config.nu)
    model = LgcpModel(lattice, Q, _lgcp_data(config, lattice, Q), mu=config.mu)
    options = ChainOptions(
        thin=config.thin,
        warmup=config.warmup,
        adapt=config.warmup > 0,
        smmala=SmmalaOptions(
            alpha=config.alpha, tolerance=config.tol, max_iterations=config.maxit, logdet_probes=config.probes,
        ),
    )
    result = mh_chain(model, config.proposer, config.iterations, config.step_size, config.seed, options)
    result.to_frame().to_csv(config.out_dir / "chain.csv", index=False)
    write_grid_csv(config.out_dir / "posterior_mean.csv", result.posterior_mean.reshape(lattice.grid))
    result.states_frame().to_csv(config.out_dir / "states.csv", index=False)
    logfire.info("lgcp chain acceptance {rate}", rate=result.acceptance_rate)
    return EXIT_OK


def cmd_simulate(config: RunConfig) -> int:
    lattice = TorusLattice.square(config.grid)
    Q = canonical_prior(config.grid, tau=config.tau, kappa=config.kappa, nu=config.nu)
    x, pattern = simulate_lgcp(lattice, Q, config.seed, mu=config.mu)
    write_grid_csv(config.out_dir / "field.csv", x.reshape(lattice.grid))
    bin_points(pattern, lattice).to_csv(config.out_dir / "counts.csv")
    pattern.to_csv(config.out_dir / "points.csv")
    return EXIT_OK


def _common_flags() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    common.add_argument("--seed", type=int)
    common.add_argument("--out-dir", dest="out_dir")
    common.add_argument("--tol", type=float)
    common.add_argument("--maxit", type=int)
    common.add_argument("--threads", type=int)
    common.add_argument("--config", dest="config_file")
    common.add_argument("--matrix")
    common.add_argument("--tau", type=float)
    common.add_argument("--kappa", type=float)
    common.add_argument("--nu", type=int)
    common.add_argument("--precond", choices=["none", "circulant", "ict"])
    common.add_argument("--alpha", type=float)
    common.add_argument("--drop-tol", dest="drop_tol", type=float)
    common.add_argument("--mu", type=float)
    common.add_argument("--grid", type=int)
    return common


def build_parser() -> argparse.ArgumentParser:
    common = _common_flags()
    parser = argparse.ArgumentParser(prog="gmrf-sampler", description=__doc__.splitlines()[0])
    subparsers = parser.add_subparsers(dest="command", required=True)

    sample = subparsers.add_parser("sample", parents=[common], argument_default=argparse.SUPPRESS)
    sample.add_argument("--reorth", choices=["full", "none"])
    sample.add_argument("--lambda-min", dest="lambda_min", type=float)

    bench = subparsers.add_parser("bench-precond", parents=[common], argument_default=argparse.SUPPRESS)
    bench.add_argument("--grids", help="comma separated grid sizes")

    logdet = subparsers.add_parser("logdet", parents=[common], argument_default=argparse.SUPPRESS)
    logdet.add_argument("--probes", type=int)
    logdet.add_argument("--colour-power", dest="colour_powers", help="comma separated powers, 0 = uncoloured")

    lgcp = subparsers.add_parser("lgcp-mcmc", parents=[common], argument_default=argparse.SUPPRESS)
    lgcp.add_argument("--proposer", choices=["rw", "mala", "smmala"])
    lgcp.add_argument("--iterations", type=int)
    lgcp.add_argument("--step-size", dest="step_size", type=float)
    lgcp.add_argument("--warmup", type=int)
    lgcp.add_argument("--thin", type=int)
    lgcp.add_argument("--probes", type=int)
    lgcp.add_argument("--points", help="CSV point pattern with columns x,y")
    lgcp.add_argument("--counts", help="CSV count grid")

    subparsers.add_parser("simulate", parents=[common], argument_default=argparse.SUPPRESS)
    return parser


def _normalise_key(key: str) -> str:
    return key.strip().lower().replace("-", "_")


def load_config(argv: Optional[Sequence[str]] = None) -> RunConfig:
    """Merge environment defaults, command-line flags and the config file.

    The config file wins over flags; every flag it overrides is logged.
    """
    dotenv.load_dotenv()
    flags = vars(build_parser().parse_args(argv))
    config_file = flags.pop("config_file", None)

    values: Dict[str, Any] = {}
    for key, variable in ENV_DEFAULTS.items():
        if os.getenv(variable) is not None:
            values[key] = os.getenv(variable)
    values.update(flags)

    if config_file is not None:
        from_file = {_normalise_key(k): v for k, v in dotenv.dotenv_values(config_file).items()}
        for key, value in from_file.items():
            if key in flags and str(flags[key]) != str(value):
                logfire.warn(
                    "config file {path} overrides --{flag}={old} with {new}",
                    path=config_file, flag=key.replace("_", "-"), old=flags[key], new=value,
                )
        values.update(from_file)
    return RunConfig.model_validate(values)


HANDLERS = {
    "sample": cmd_sample,
    "logdet": cmd_logdet,
    "lgcp-mcmc": cmd_lgcp,
    "simulate": cmd_simulate,
}


def run(config: RunConfig) -> int:
    config.out_dir.mkdir(parents=True, exist_ok=True)
    with logfire.span("{command}", command=config.command, out_dir=str(config.out_dir)):
        if config.command == "bench-precond":
            cmd_bench_precond(config)
            return EXIT_OK
        return HANDLERS[config.command](config)


def main(argv: Optional[Sequence[str]] = None) -> int:
    logfire.configure(send_to_logfire="if-token-present")
    try:
        config = load_config(argv)
    except ValidationError as exc:
        print(f"invalid configuration:\n{exc}", file=sys.stderr)
        return EXIT_ERROR
    try:
        return run(config)
    except (GmrfError, ValueError, OSError) as exc:
        logfire.error("{command} failed: {error}", command=config.command, error=str(exc))
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


__all__ = [
    "RunConfig",
    "BenchRecord",
    "build_operator",
    "build_preconditioner",
    "build_parser",
    "load_config",
    "cmd_sample",
    "cmd_bench_precond",
    "cmd_logdet",
    "cmd_lgcp",
    "cmd_simulate",
    "run",
    "main",
]
