import math

import numpy as np
import pytest

from gmrf_sampler import krylov
from gmrf_sampler.errors import NotSPDError
from gmrf_sampler.krylov import (
    QuadratureOptions,
    SamplerOptions,
    apriori_bound,
    cg_solve,
    lanczos_quadrature_logform,
    lanczos_sample,
    run_lanczos_sampler,
    tridiagonal_inverse_sqrt_e1,
)
from gmrf_sampler.operators import DenseOperator, DiagonalOperator, SumOperator, canonical_prior, identity_operator
from gmrf_sampler.utils import random_stream

from tests.utils import (
    dense_log,
    frobenius_relative,
    inverse_sqrt,
    random_spd,
    second_moment,
    tridiagonal,
)


def test_identity_returns_the_noise():
    z = random_stream(0).standard_normal(5)
    x, report = lanczos_sample(identity_operator(5), z)
    np.testing.assert_allclose(x, z, atol=1e-14)
    assert report.iterations == 1
    assert report.bounds[0] <= 1e-14
    assert report.converged and report.exact_termination


def test_zero_noise_gives_zero_sample():
    x, report = lanczos_sample(identity_operator(3), np.zeros(3))
    np.testing.assert_array_equal(x, np.zeros(3))
    assert report.iterations == 0
    assert report.converged


def test_full_run_matches_inverse_square_root():
    A = tridiagonal(8, 2.0, -0.9)
    z = random_stream(1).standard_normal(8)
    x, report = lanczos_sample(DenseOperator(A), z, SamplerOptions(tolerance=1e-30))
    assert report.iterations == 8
    expected = inverse_sqrt(A) @ z
    assert np.linalg.norm(x - expected) <= 1e-10 * np.linalg.norm(expected)


def test_default_seed_draws_noise():
    A = DenseOperator(tridiagonal(6, 3.0, -1.0))
    first, _ = lanczos_sample(A, options=SamplerOptions(seed=4))
    second, _ = lanczos_sample(A, options=SamplerOptions(seed=4))
    np.testing.assert_array_equal(first, second)
    z = random_stream(4).standard_normal(6)
    np.testing.assert_allclose(first, inverse_sqrt(A.matrix) @ z, rtol=1e-6, atol=1e-8)


def test_breakdown_on_few_distinct_eigenvalues():
    Q = DiagonalOperator(np.repeat([1.0, 4.0, 9.0], 3))
    z = random_stream(2).standard_normal(9)
    x, report = lanczos_sample(Q, z, SamplerOptions(tolerance=1e-30))
    assert report.iterations == 3
    assert report.exact_termination and report.converged
    np.testing.assert_allclose(x, z / np.sqrt(Q.diag), atol=1e-10)


def test_recurrence_and_orthogonality():
    rng = random_stream(3)
    A = random_spd(40, rng)
    z = rng.standard_normal(40)
    _, _, state = run_lanczos_sampler(
        DenseOperator(A), z, SamplerOptions(max_iterations=10, tolerance=1e-30)
    )
    V = state.basis.T
    T = state.tridiagonal()
    residual = A @ V - V @ T
    scale = np.linalg.norm(A, 2)
    assert np.linalg.norm(residual[:, :-1]) <= 1e-8 * scale
    assert abs(np.linalg.norm(residual[:, -1]) - state.betas[-1]) <= 1e-8 * scale
    assert state.orthogonality_error() <= 1e-8


def test_posterior_bound_holds_at_every_iteration():
    rng = random_stream(5)
    for trial in range(100):
        n = int(rng.integers(5, 61))
        A = random_spd(n, rng, log_condition=rng.uniform(0.5, 3.0))
        z = rng.standard_normal(n)
        lam_min = float(np.linalg.eigvalsh(A)[0])
        _, report, state = run_lanczos_sampler(
            DenseOperator(A), z, SamplerOptions(max_iterations=n, tolerance=1e-10, lambda_min=lam_min)
        )
        exact = inverse_sqrt(A) @ z
        slack = 1e-9 * np.linalg.norm(exact)
        for m in range(1, report.iterations + 1):
            error = np.linalg.norm(state.sample(m) - exact)
            assert error <= report.bounds[m - 1] + slack, (trial, m)


def test_apriori_bound_dominates_error():
    rng = random_stream(6)
    for _ in range(10):
        n = int(rng.integers(8, 65))
        A = random_spd(n, rng, log_condition=2.0)
        z = rng.standard_normal(n)
        eigenvalues = np.linalg.eigvalsh(A)
        kappa = eigenvalues[-1] / eigenvalues[0]
        _, report, state = run_lanczos_sampler(
            DenseOperator(A), z, SamplerOptions(max_iterations=n, tolerance=1e-10)
        )
        exact = inverse_sqrt(A) @ z
        for m in range(1, report.iterations + 1):
            error = np.linalg.norm(state.sample(m) - exact)
            prior_bound = apriori_bound(kappa, eigenvalues[0], m, np.linalg.norm(z))
            assert error <= prior_bound + 1e-9 * np.linalg.norm(exact)


def test_finite_termination():
    rng = random_stream(7)
    for n in (3, 10, 20):
        A = random_spd(n, rng, log_condition=1.0)
        z = rng.standard_normal(n)
        x, report = lanczos_sample(DenseOperator(A), z, SamplerOptions(tolerance=1e-30))
        assert report.iterations <= n
        exact = inverse_sqrt(A) @ z
        assert np.linalg.norm(x - exact) <= 1e-8 * np.linalg.norm(exact)


def test_samples_have_inverse_covariance():
    A = tridiagonal(16, 2.0, -0.9)
    lam_min = float(np.linalg.eigvalsh(A)[0])
    op = DenseOperator(A)
    options = SamplerOptions(tolerance=1e-10, lambda_min=lam_min)
    rng = random_stream(8)
    samples = np.array([lanczos_sample(op, rng.standard_normal(16), options)[0] for _ in range(20_000)])
    assert frobenius_relative(second_moment(samples), np.linalg.inv(A)) <= 0.05


def test_bound_decay_accelerates():
    Q = canonical_prior(16)
    z = random_stream(9).standard_normal(Q.dim)
    _, report = lanczos_sample(Q, z, SamplerOptions(tolerance=1e-12, lambda_min=Q.lambda_min))
    decrements = -np.diff(np.log(report.bounds))
    quarter = len(decrements) // 4
    assert quarter >= 2
    assert decrements[-quarter:].mean() > decrements[:quarter].mean()


def test_unreorthogonalised_matches_full():
    A = DenseOperator(tridiagonal(30, 3.0, -1.0))
    z = random_stream(10).standard_normal(30)
    full, full_report = lanczos_sample(A, z, SamplerOptions(tolerance=1e-10))
    plain, plain_report = lanczos_sample(A, z, SamplerOptions(tolerance=1e-10, reorthogonalize="none"))
    assert plain_report.converged
    assert np.linalg.norm(plain - full) <= 1e-7 * np.linalg.norm(full)
    assert abs(plain_report.iterations - full_report.iterations) <= 2


def test_check_every_spaces_the_stopping_test():
    A = DenseOperator(tridiagonal(50, 3.0, -1.0))
    z = random_stream(11).standard_normal(50)
    _, report = lanczos_sample(A, z, SamplerOptions(tolerance=1e-6, check_every=5))
    assert report.iterations % 5 == 0
    assert report.bounds.size == report.iterations


def test_max_iterations_stops_unconverged():
    Q = canonical_prior(16)
    _, report = lanczos_sample(Q, random_stream(12).standard_normal(Q.dim), SamplerOptions(max_iterations=3))
    assert report.iterations == 3
    assert not report.converged


def test_indefinite_operator_is_detected():
    Q = DenseOperator(np.diag([1.0, -1.0, 2.0]))
    with pytest.raises(NotSPDError):
        lanczos_sample(Q, np.ones(3))


def test_report_frame(tmp_path):
    A = DenseOperator(tridiagonal(10, 3.0, -1.0))
    _, report = lanczos_sample(A, np.ones(10))
    report.to_csv(tmp_path / "convergence.csv")
    header = (tmp_path / "convergence.csv").read_text().splitlines()[0]
    assert header == "iteration,bound,alpha,beta"
    assert report.lambda_min_source == "ritz"


def test_cg_identity_and_zero_rhs():
    b = np.arange(1.0, 5.0)
    result = cg_solve(identity_operator(4), b)
    np.testing.assert_allclose(result.x, b)
    assert result.iterations == 1
    zero = cg_solve(identity_operator(4), np.zeros(4))
    assert zero.iterations == 0 and zero.converged


def test_cg_matches_dense_solve():
    rng = random_stream(13)
    A = random_spd(32, rng)
    b = rng.standard_normal(32)
    result = cg_solve(DenseOperator(A), b, tol=1e-12)
    assert result.converged
    np.testing.assert_allclose(result.x, np.linalg.solve(A, b), rtol=1e-8, atol=1e-10)


def test_apriori_bound_values():
    assert apriori_bound(4.0, 1.0, 0, 1.0) == pytest.approx(4.0)
    assert apriori_bound(4.0, 1.0, 2, 1.0) == pytest.approx(4.0 / 9.0)
    assert apriori_bound(1.0, 1.0, 1, 1.0) == 0.0
    assert apriori_bound(4.0, 4.0, 0, 3.0) == pytest.approx(6.0)
    with pytest.raises(ValueError):
        apriori_bound(0.5, 1.0, 1, 1.0)
    with pytest.raises(ValueError):
        apriori_bound(2.0, 0.0, 1, 1.0)


def test_quadrature_identity_and_diagonal():
    assert lanczos_quadrature_logform(identity_operator(6), np.ones(6)) == pytest.approx(0.0, abs=1e-14)
    D = DiagonalOperator([1.0, 2.0, 5.0])
    unit = np.array([0.0, 0.0, 1.0])
    assert lanczos_quadrature_logform(D, unit) == pytest.approx(math.log(5.0), rel=1e-12)


def test_quadrature_matches_dense_log():
    rng = random_stream(14)
    A = random_spd(16, rng)
    v = rng.standard_normal(16)
    expected = v @ dense_log(A) @ v
    tight = lanczos_quadrature_logform(DenseOperator(A), v, QuadratureOptions(rtol=1e-14))
    assert tight == pytest.approx(expected, abs=1e-8 * max(abs(expected), 1.0))
    default = lanczos_quadrature_logform(DenseOperator(A), v)
    assert default == pytest.approx(expected, rel=1e-5)


def test_quadrature_rejects_zero_vector():
    with pytest.raises(ValueError):
        lanczos_quadrature_logform(identity_operator(3), np.zeros(3))


def _graded_tridiagonal(m: int):
    alphas = np.logspace(-2.0, 2.0, m)
    off = 0.4 * np.sqrt(alphas[:-1] * alphas[1:])
    return alphas, off


def test_inverse_sqrt_quadrature_matches_dense():
    alphas, off = _graded_tridiagonal(300)
    T = np.diag(alphas) + np.diag(off, 1) + np.diag(off, -1)
    expected = inverse_sqrt(T)[:, 0]
    for method in ("eigh", "quadrature"):
        estimate = tridiagonal_inverse_sqrt_e1(alphas, off, method=method)
        assert np.linalg.norm(estimate - expected) <= 1e-8 * np.linalg.norm(expected)


def test_inverse_sqrt_rejects_bad_input():
    alphas, off = _graded_tridiagonal(5)
    with pytest.raises(ValueError):
        tridiagonal_inverse_sqrt_e1(alphas, off, method="pade")
    for method in ("eigh", "quadrature"):
        with pytest.raises(NotSPDError):
            tridiagonal_inverse_sqrt_e1(np.array([1.0, 1.0]), np.array([2.0]), method=method)


def test_long_runs_switch_to_quadrature(monkeypatch):
    A = DenseOperator(tridiagonal(200, 3.0, -1.0))
    z = random_stream(15).standard_normal(200)
    options = SamplerOptions(tolerance=1e-10, reorthogonalize="none")
    expected, _ = lanczos_sample(A, z, options)
    monkeypatch.setattr(krylov, "EIGH_SIZE_LIMIT", 5)
    x, report = lanczos_sample(A, z, options)
    assert report.iterations > 5
    assert np.linalg.norm(x - expected) <= 1e-9 * np.linalg.norm(expected)


def test_unreorthogonalised_large_grid_converges():
    Q = canonical_prior(64)
    shift = 1.0 / Q.dim
    G = SumOperator([Q, DiagonalOperator(np.full(Q.dim, shift))])
    options = SamplerOptions(
        tolerance=1e-8, max_iterations=20_000, reorthogonalize="none", lambda_min=Q.lambda_min + shift,
    )
    x, report = lanczos_sample(G, random_stream(0, 64).standard_normal(Q.dim), options)
    assert report.converged
    assert report.iterations > 400
    assert np.all(np.isfinite(x))


def test_indefinite_operator_carries_partial_report():
    Q = DenseOperator(np.array([[1.0, 2.0], [2.0, 1.0]]))
    with pytest.raises(NotSPDError) as info:
        lanczos_sample(Q, np.array([1.0, 0.0]))
    report = info.value.report
    assert report is not None and not report.converged
    assert report.iterations == 1
    assert len(report.to_frame()) == 1
