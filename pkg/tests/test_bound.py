"""Tests for the efficiency bound and curvature diagnostics."""

import numpy as np
import pytest
from scipy import integrate, stats

from psgel.domain.models import DgpSpec, FitConfig, ParamPoint, SieveSpec
from psgel.services.bound_service import (
    PopulationCriterion,
    build_operator,
    eps_orthogonality,
    information_matrix,
    q_j_criterion,
    range_projection,
    truncation_sweep,
    truth_projection,
    v0_bound,
    varpi_profile,
)
from psgel.services.dgp_service import build_oracle
from psgel.services.estimator_service import pseudo_true


def make_oracle(**spec):
    """Create the oracle of a design."""
    return build_oracle(DgpSpec(**spec))


def test_operator_adjoint():
    """Test <T g, f>_X = <g, T* f>_W on random pairs."""
    oracle = make_oracle()
    op = build_operator(oracle, 32, 32)
    rng = np.random.default_rng(0)

    for _ in range(100):
        g = rng.standard_normal(32)
        f = rng.standard_normal(32)
        lhs = op.inner_x(op.apply(g), f)
        rhs = op.inner_w(g, op.adjoint(f))
        scale = np.sqrt(op.inner_w(g, g) * op.inner_x(f, f))
        assert abs(lhs - rhs) <= 1e-10 * max(scale, 1.0)


def test_operator_is_nonnegative():
    """Test that T maps positive functions to positive functions."""
    op = build_operator(make_oracle(), 24, 24)

    assert np.all(op.t_matrix >= 0.0)
    assert np.all(op.apply(np.ones(24)) > 0.0)


def test_range_projection_is_orthogonal_projector():
    """Test P^2 = P and P' = P."""
    op = build_operator(make_oracle(), 32, 32)
    p = range_projection(op)

    assert np.allclose(p @ p, p, atol=1e-10)
    assert np.allclose(p, p.T, atol=1e-12)


def test_v0_exceeds_residual_variance():
    """Test V0 = ||eps||^2 + correction with a nonnegative correction."""
    oracle = make_oracle()
    op = build_operator(oracle, 32, 32)
    bound = v0_bound(op, oracle, 0.5)

    assert bound.eps_norm_sq >= 0.0
    assert bound.correction_sq >= 0.0
    assert bound.v0 == pytest.approx(bound.eps_norm_sq + bound.correction_sq)
    assert np.all(np.diff(bound.svd_spectrum) <= 1e-12)
    assert bound.truncation_index <= 32


def test_truncation_sweep_is_monotone():
    """Test V0 does not decrease as more singular values are kept."""
    oracle = make_oracle()
    op = build_operator(oracle, 32, 32)
    sweep = truncation_sweep(op, oracle, 0.5, [1, 2, 4, 8, 16])
    values = [r.v0 for r in sweep]

    assert [r.truncation_index for r in sweep] == [1, 2, 4, 8, 16]
    assert all(b >= a - 1e-12 for a, b in zip(values, values[1:]))


def test_residual_is_orthogonal_to_instruments():
    """Test E[eps rho2 f(X)] = 0 for arbitrary f."""
    oracle = make_oracle(tau=0.3, rho_e=0.7)
    op = build_operator(oracle, 24, 24)
    rng = np.random.default_rng(1)

    for _ in range(10):
        assert eps_orthogonality(op, oracle, 0.3, rng.standard_normal(24)) == pytest.approx(0.0, abs=1e-10)


def test_population_criterion_is_nonnegative():
    """Test Q_J >= 0 at random points and 0 at the truth in the sieve."""
    oracle = make_oracle()
    config = FitConfig(sieve=SieveSpec(k_order=3, j_order=4))
    criterion = PopulationCriterion(oracle, config)
    rng = np.random.default_rng(2)

    for _ in range(10):
        alpha = ParamPoint.from_vector(rng.standard_normal(4))
        assert criterion.value(alpha) >= 0.0
    truth = truth_projection(oracle, criterion.bases)
    assert q_j_criterion(truth, oracle, config, criterion.bases) == pytest.approx(0.0, abs=1e-12)


def test_population_gradient_matches_finite_differences():
    """Test the analytic gradient of the penalized criterion."""
    oracle = make_oracle()
    criterion = PopulationCriterion(oracle, FitConfig(sieve=SieveSpec(k_order=2, j_order=3, gamma_k=0.1)))
    x = np.array([0.3, 0.2, 0.1])
    step = 1e-6
    numeric = np.empty(3)
    for i in range(3):
        e = np.zeros(3)
        e[i] = step
        numeric[i] = (
            criterion.penalized(ParamPoint.from_vector(x + e)) - criterion.penalized(ParamPoint.from_vector(x - e))
        ) / (2 * step)

    assert np.allclose(criterion.penalized_gradient(ParamPoint.from_vector(x)), numeric, atol=1e-6)


def test_varpi_profile():
    """Test the curvature profile starts at zero and never decreases."""
    oracle = make_oracle()
    config = FitConfig(sieve=SieveSpec(k_order=2, j_order=3))
    report = varpi_profile(oracle, config, [0.0, 0.05, 0.1, 0.2], n_starts=2)
    ts, varpi = zip(*report.varpi_samples)

    assert ts == (0.0, 0.05, 0.1, 0.2)
    assert varpi[0] == 0.0
    assert all(b >= a for a, b in zip(varpi, varpi[1:]))
    assert report.flags["boundary_heuristic"]
    assert len(report.q_j_values) == 3


def test_information_matrix_is_symmetric():
    """Test the local information at the truth is symmetric positive definite."""
    oracle = make_oracle()
    criterion = PopulationCriterion(oracle, FitConfig(sieve=SieveSpec(k_order=3, j_order=5)))
    info = information_matrix(criterion, truth_projection(oracle, criterion.bases))

    assert np.allclose(info, info.T)
    assert np.linalg.eigvalsh(info)[0] > 0.0


def test_operator_applied_to_one_matches_latent_quadrature():
    """Test T[1](x) against adaptive quadrature over the latent V at five x-nodes."""
    oracle = make_oracle()
    op = build_operator(oracle, 64, 64)
    t_one = op.apply(np.ones(64))
    spec = oracle.spec

    for i in (16, 24, 32, 40, 48):
        x = op.x_nodes[i]

        def integrand(v: float) -> float:
            w = stats.norm.cdf(spec.a * stats.norm.ppf(x) + spec.b * v)
            density = oracle.cond_pdf_y_latent(oracle.h0.h(np.array([w])), np.array([w]), np.array([v]))
            return float(stats.norm.pdf(v) * density[0])

        expected, _ = integrate.quad(integrand, -np.inf, np.inf, epsabs=1e-12, epsrel=1e-10)
        assert t_one[i] == pytest.approx(expected, rel=1e-6)
        # p_{Y|WX}(h0(w)) depends on v alone and integrates to p_eps(0)
        assert expected == pytest.approx(stats.norm.pdf(oracle.z_tau) / spec.sigma, rel=1e-8)


def test_operator_norm_is_stable_under_refinement():
    """Test that refining the grid from 64 to 128 nodes moves ||T|| by less than 1e-4."""
    oracle = make_oracle()
    coarse = np.linalg.norm(build_operator(oracle, 64, 64).weighted, 2)
    fine = np.linalg.norm(build_operator(oracle, 128, 128).weighted, 2)

    assert abs(fine - coarse) <= 1e-4 * fine


@pytest.mark.slow
def test_information_floor_falls_with_sieve_order():
    """Test that the smallest eigenvalue of I_L decreases across K = 3, 6, 9."""
    oracle = make_oracle()
    floors = []
    for k in (3, 6, 9):
        config = FitConfig(sieve=SieveSpec(k_order=k, j_order=11))
        criterion = PopulationCriterion(oracle, config)
        alpha_l0, _ = pseudo_true(oracle, config, criterion)
        floors.append(np.linalg.eigvalsh(information_matrix(criterion, alpha_l0))[0])

    assert floors[0] > floors[1] > floors[2] > 0.0
