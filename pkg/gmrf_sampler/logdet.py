"""Stochastic log-determinants: log det Q = tr log Q = E[v^T log(Q) v].

Each quadratic form is evaluated by Lanczos quadrature. The coloured
variant splits every Rademacher probe over the colour classes of the
distance-p graph of Q, which removes the large near-diagonal entries of
log(Q) from the estimator's variance.
"""

import math

from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import logfire
import networkx as nx
import numpy as np
import pandas as pd
import scipy.sparse.csgraph

from gmrf_sampler.errors import DecayBoundError, DimensionCapError
from gmrf_sampler.krylov import QuadratureOptions, lanczos_quadrature_logform
from gmrf_sampler.operators import DenseOperator, LinearOperator, SparseOperator
from gmrf_sampler.precond import Capability, FactoredPreconditioner, PreconditionedOperator
from gmrf_sampler.utils import map_in_threads, rademacher, random_stream


COLOUR_VARIANCE_CAP = 1024


@dataclass
class LogDetOptions:
    seed: int = 0
    threads: int = 1
    quadrature: QuadratureOptions = field(default_factory=QuadratureOptions)

    def __post_init__(self):
        if self.threads < 1:
            raise ValueError("threads must be at least 1")


@dataclass
class ColouredProbeSet:
    colours: np.ndarray
    power: int

    def __post_init__(self):
        self.colours = np.asarray(self.colours, dtype=int)

    @classmethod
    def single_class(cls, n: int) -> "ColouredProbeSet":
        return cls(np.zeros(n, dtype=int), power=0)

    @property
    def dim(self) -> int:
        return int(self.colours.size)

    @property
    def n_colours(self) -> int:
        return int(self.colours.max()) + 1 if self.colours.size else 0

    @property
    def classes(self) -> List[np.ndarray]:
        return [np.flatnonzero(self.colours == c) for c in range(self.n_colours)]


@dataclass
class LogDetEstimate:
    """Per-probe totals and their summary.

    `offset` is the deterministic part added to every probe total (2 logdet F
    for the preconditioned estimator). Quadrature error per probe is bounded
    by the quadrature rtol and treated as negligible next to the Monte Carlo
    error.
    """

    values: np.ndarray
    per_colour: Optional[np.ndarray] = None
    offset: float = 0.0
    quadrature_rtol: float = QuadratureOptions().rtol

    @property
    def estimate(self) -> float:
        return float(np.mean(self.values))

    @property
    def probes(self) -> int:
        return int(self.values.size)

    @property
    def variance(self) -> float:
        if self.values.size < 2:
            return 0.0
        return float(np.var(self.values, ddof=1))

    @property
    def standard_error(self) -> float:
        return math.sqrt(self.variance / self.probes)

    @property
    def n_colours(self) -> int:
        return 1 if self.per_colour is None else int(self.per_colour.shape[1])

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame({"probe": np.arange(self.probes), "value": self.values})
        if self.per_colour is not None:
            for c in range(self.per_colour.shape[1]):
                frame[f"colour_{c}"] = self.per_colour[:, c]
        return frame

    def summary(self) -> Dict[str, float]:
        return {
            "estimate": self.estimate,
            "standard_error": self.standard_error,
            "variance": self.variance,
            "probes": self.probes,
            "colours": self.n_colours,
            "offset": self.offset,
            "quadrature_rtol": self.quadrature_rtol,
        }

    def to_csv(self, path: Path | str) -> None:
        self.to_frame().to_csv(path, index=False)


def hutchinson_logdet(
    Q: LinearOperator, N: int, options: Optional[LogDetOptions] = None
) -> LogDetEstimate:
    """Mean of v^T log(Q) v over N Rademacher probes.

    Probe r is drawn from substream (seed, r, 0), so the estimate does not
    depend on `threads`.
    """
    if N < 1:
        raise ValueError("need at least one probe")
    options = options or LogDetOptions()

    def _probe(r: int) -> float:
        v = rademacher(random_stream(options.seed, r, 0), Q.dim)
        return lanczos_quadrature_logform(Q, v, options.quadrature)

    with logfire.span("hutchinson logdet n={n} probes={N}", n=Q.dim, N=N):
        values = np.array(map_in_threads(_probe, range(N), threads=options.threads))
        estimate = LogDetEstimate(values=values, quadrature_rtol=options.quadrature.rtol)
        logfire.info("logdet estimate {estimate} +- {se}", estimate=estimate.estimate, se=estimate.standard_error)
        return estimate


def _distance_graph(Q: SparseOperator, p: int) -> nx.Graph:
    adjacency = nx.from_scipy_sparse_array(Q.matrix)
    adjacency.remove_edges_from(nx.selfloop_edges(adjacency))
    graph = nx.Graph()
    graph.add_nodes_from(range(Q.dim))
    for source in range(Q.dim):
        reached = nx.single_source_shortest_path_length(adjacency, source, cutoff=p)
        graph.add_edges_from((source, target) for target in reached if target > source)
    return graph


def _natural_order(graph: nx.Graph, colors: dict):
    return sorted(graph)


def colour_graph(Q: SparseOperator, p: int) -> ColouredProbeSet:
    """Greedy colouring, in natural vertex order, of the distance-p graph of Q.

    Vertices of one colour are more than p steps apart in the adjacency
    graph of Q. Neighbourhoods are found by breadth-first search, so Q^p is
    never formed.
    """
    if p < 1:
        raise ValueError(f"power must be at least 1, got {p}")
    with logfire.span("colour graph n={n} p={p}", n=Q.dim, p=p):
        graph = _distance_graph(Q, p)
        colouring = nx.greedy_color(graph, strategy=_natural_order)
        colours = np.array([colouring[v] for v in range(Q.dim)], dtype=int)
        probes = ColouredProbeSet(colours, power=p)
        logfire.info("{k} colours for p={p}", k=probes.n_colours, p=p)
        return probes


def coloured_hutchinson_logdet(
    Q: LinearOperator,
    probes: ColouredProbeSet,
    N: int,
    options: Optional[LogDetOptions] = None,
) -> LogDetEstimate:
    """Sum over colour classes of class-restricted Rademacher quadratic forms.

    Class c of round r uses substream (seed, r, c); a single class covering
    every index therefore reproduces `hutchinson_logdet` exactly.
    """
    if N < 1:
        raise ValueError("need at least one round")
    if probes.dim != Q.dim:
        raise ValueError(f"probe set covers {probes.dim} indices, operator has {Q.dim}")
    options = options or LogDetOptions()
    classes = probes.classes

    def _round(r: int) -> np.ndarray:
        parts = np.empty(len(classes))
        for c, members in enumerate(classes):
            v = np.zeros(Q.dim)
            v[members] = rademacher(random_stream(options.seed, r, c), members.size)
            parts[c] = lanczos_quadrature_logform(Q, v, options.quadrature)
        return parts

    with logfire.span(
        "coloured hutchinson logdet n={n} rounds={N} colours={k}", n=Q.dim, N=N, k=len(classes)
    ):
        per_colour = np.array(map_in_threads(_round, range(N), threads=options.threads))
        return LogDetEstimate(
            values=per_colour.sum(axis=1),
            per_colour=per_colour,
            quadrature_rtol=options.quadrature.rtol,
        )


def preconditioned_logdet(
    Q: LinearOperator,
    P: FactoredPreconditioner,
    N: int,
    options: Optional[LogDetOptions] = None,
    probes: Optional[ColouredProbeSet] = None,
) -> LogDetEstimate:
    """log det Q = log det(F^-1 Q F^-T) + 2 log det F.

    Only the first term is estimated stochastically (coloured when `probes`
    is given).
    """
    P.require(Capability.LOGDET, Capability.APPLY_F_INV, Capability.APPLY_F_T_INV)
    inner = PreconditionedOperator(Q, P)
    offset = 2.0 * P.logdet_f()
    with logfire.span("preconditioned logdet n={n}", n=Q.dim, preconditioner=type(P).__name__):
        if probes is None:
            stochastic = hutchinson_logdet(inner, N, options)
        else:
            stochastic = coloured_hutchinson_logdet(inner, probes, N, options)
    return LogDetEstimate(
        values=stochastic.values + offset,
        per_colour=stochastic.per_colour,
        offset=offset,
        quadrature_rtol=stochastic.quadrature_rtol,
    )


@dataclass
class DecayBoundParams:
    """Spectral interval and Bernstein ellipse parameter (rho = 2R)."""

    lambda_min: float
    lambda_max: float
    R: float

    def __post_init__(self):
        if not 0.0 < self.lambda_min <= self.lambda_max:
            raise ValueError("need 0 < lambda_min <= lambda_max")
        if not 2.0 * self.R > 1.0:
            raise ValueError(f"need 2R > 1, got R = {self.R}")


def decay_bound(params: DecayBoundParams, dij: float) -> float:
    """Upper bound on |log(Q)_ij| for vertices at graph distance dij.

    The log is evaluated at the two real-axis ends t = +-(R + 1/(4R)) of the
    ellipse mapped onto the spectral interval.
    """
    if dij < 0:
        raise ValueError("graph distance must be non-negative")
    rho = 2.0 * params.R
    half_axis = params.R + 1.0 / (4.0 * params.R)
    width = params.lambda_max - params.lambda_min
    centre = params.lambda_max + params.lambda_min
    arguments = [0.5 * (width * t + centre) for t in (half_axis, -half_axis)]
    if min(arguments) <= 0.0:
        raise DecayBoundError(
            f"R = {params.R} puts the ellipse past zero (log argument {min(arguments):.3e})"
        )
    peak = max(abs(math.log(a)) for a in arguments)
    constant = 2.0 / (1.0 - 1.0 / rho) * peak
    if math.isinf(dij):
        return 0.0
    return constant * rho ** (-dij)


def dense_logm(Q: DenseOperator) -> np.ndarray:
    """log(Q) by symmetric eigendecomposition."""
    eigenvalues, vectors = np.linalg.eigh(Q.matrix)
    if eigenvalues[0] <= 0.0:
        raise ValueError(f"matrix logarithm needs an SPD matrix, smallest eigenvalue {eigenvalues[0]:.3e}")
    return (vectors * np.log(eigenvalues)) @ vectors.T


def exact_colour_variance(Q_dense: DenseOperator, probes: ColouredProbeSet) -> float:
    """Variance of one coloured round: 2 sum_c sum_{i != j in c} B_ij^2, B = log(Q).

    The pair sum runs over ordered pairs; the factor 2 is the Rademacher
    variance of a quadratic form.
    """
    if Q_dense.dim > COLOUR_VARIANCE_CAP:
        raise DimensionCapError(f"dimension {Q_dense.dim} exceeds {COLOUR_VARIANCE_CAP}")
    B = dense_logm(Q_dense)
    total = 0.0
    for members in probes.classes:
        block = B[np.ix_(members, members)]
        total += float(np.sum(block**2) - np.sum(np.diag(block) ** 2))
    return 2.0 * total


def graph_distances(Q: SparseOperator) -> np.ndarray:
    """Hop distances in the adjacency graph of Q (inf between components)."""
    return scipy.sparse.csgraph.shortest_path(Q.matrix, method="D", directed=False, unweighted=True)


__all__ = [
    "LogDetOptions",
    "ColouredProbeSet",
    "LogDetEstimate",
    "DecayBoundParams",
    "hutchinson_logdet",
    "colour_graph",
    "coloured_hutchinson_logdet",
    "preconditioned_logdet",
    "decay_bound",
    "dense_logm",
    "exact_colour_variance",
    "graph_distances",
]
