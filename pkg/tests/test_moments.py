"""Tests for the moment vector and its averages."""

import numpy as np
import pytest

from psgel.domain.enums import TrueFunction
from psgel.domain.models import Dataset, DgpSpec, ParamPoint, SieveSpec
from psgel.services.dgp_service import build_oracle, simulate
from psgel.services.moment_service import (
    MomentDesign,
    build_bases,
    g_bar,
    g_eval,
    g_eval_smoothed,
    g_matrix,
    h_mat,
    population_bases,
    population_g,
    population_g_converged,
    population_g_truth,
    population_h,
    smoothed_rho2_jacobian,
)
from psgel.services.sieve_service import project_truth
from psgel.utils.numerics import tree_mean

SPEC = SieveSpec(k_order=3, j_order=4)


def make_alpha(theta: float = 0.2, pi=(0.1, 0.3, -0.2)) -> ParamPoint:
    """Create a parameter point for the three-term sieve."""
    return ParamPoint(theta=theta, pi=list(pi))


def make_data(n: int = 200, seed: int = 0) -> Dataset:
    """Create a sample from the default design."""
    return simulate(DgpSpec(), n, seed)


def test_indicator_residual_signs():
    """Test rho2 = 1 - tau below h and -tau above."""
    bases = population_bases(SPEC)
    alpha = ParamPoint(theta=0.0, pi=[0.0, 0.0, 0.0])
    below = g_eval(-1.0, 0.5, 0.5, alpha, bases, 0.5)
    above = g_eval(1.0, 0.5, 0.5, alpha, bases, 0.5)
    q = bases.q.eval(np.array([0.5]))[0]

    assert np.allclose(below[1:], 0.5 * q)
    assert np.allclose(above[1:], -0.5 * q)


def test_rho1_vanishes_at_weighted_derivative():
    """Test rho1 = 0 when theta equals mu(w) h'(w)."""
    bases = population_bases(SPEC)
    alpha = make_alpha()
    w = 0.3
    slope = float(bases.weight.mu(np.array([w]))[0] * bases.h.dh(alpha, np.array([w]))[0])

    g = g_eval(0.0, w, 0.4, alpha.with_theta(slope), bases, 0.5)
    assert g[0] == pytest.approx(0.0, abs=1e-14)


def test_scalar_and_vector_evaluation_agree():
    """Test that single observations match rows of the batch evaluation."""
    data = make_data(20)
    bases = build_bases(SPEC, data)
    alpha = make_alpha()
    g = g_matrix(MomentDesign.from_data(data, bases), alpha, 0.5)

    for i in (0, 7, 19):
        row = g_eval(data.y[i], data.w[i], data.x[i], alpha, bases, 0.5)
        assert np.allclose(row, g[i], atol=1e-14)
    assert np.allclose(g_bar(data, alpha, bases, 0.5), tree_mean(g))


def test_h_mat_of_one_observation():
    """Test that n = 1 gives the outer product of its moment vector."""
    data = Dataset(y=[0.3], w=[0.4], x=[0.6])
    bases = population_bases(SPEC)
    alpha = make_alpha()
    g = g_eval(0.3, 0.4, 0.6, alpha, bases, 0.5)

    assert np.allclose(h_mat(data, alpha, bases, 0.5), np.outer(g, g), atol=1e-14)


def test_median_instrument_block_is_quarter_identity():
    """Test the instrument block of H at tau = 0.5 with whitened instruments."""
    data = make_data()
    bases = build_bases(SPEC, data)
    h = h_mat(data, make_alpha(), bases, 0.5)

    assert np.allclose(h[1:, 1:], 0.25 * np.eye(SPEC.j), atol=1e-10)


def test_h_mat_is_positive_semidefinite():
    """Test the second-moment matrix is symmetric PSD."""
    data = make_data()
    bases = build_bases(SPEC, data)
    h = h_mat(data, make_alpha(), bases, 0.3)

    assert np.allclose(h, h.T)
    assert np.linalg.eigvalsh(h)[0] >= -1e-12


def test_smoothing_limits():
    """Test the smoothed moment in the small and large bandwidth limits."""
    data = make_data(50)
    bases = build_bases(SPEC, data)
    alpha = make_alpha()
    exact = g_eval(data.y, data.w, data.x, alpha, bases, 0.3)

    sharp = g_eval_smoothed(data.y, data.w, data.x, alpha, bases, 0.3, 1e-10)
    flat = g_eval_smoothed(data.y, data.w, data.x, alpha, bases, 0.3, 1e10)

    assert np.allclose(sharp, exact, atol=1e-12)
    assert np.allclose(flat[:, 1:], 0.2 * bases.q.eval(data.x), atol=1e-9)
    assert np.allclose(flat[:, 0], exact[:, 0])


def test_smoothed_jacobian_matches_finite_differences():
    """Test the analytic derivative of the smoothed moment in pi."""
    data = make_data(100)
    bases = build_bases(SPEC, data)
    design = MomentDesign.from_data(data, bases)
    alpha = make_alpha()
    bandwidth = 0.3
    analytic = design.q.T @ smoothed_rho2_jacobian(design, alpha, bandwidth) / data.n

    step = 1e-6
    numeric = np.empty_like(analytic)
    for k in range(3):
        e = np.zeros(3)
        e[k] = step
        up = tree_mean(g_matrix(design, ParamPoint(alpha.theta, alpha.pi + e), 0.5, bandwidth)[:, 1:])
        down = tree_mean(g_matrix(design, ParamPoint(alpha.theta, alpha.pi - e), 0.5, bandwidth)[:, 1:])
        numeric[:, k] = (up - down) / (2 * step)

    assert np.allclose(analytic, numeric, atol=1e-7)


def test_smoothed_moment_rejects_zero_bandwidth():
    """Test that a non-positive bandwidth is a ValueError."""
    bases = population_bases(SPEC)

    with pytest.raises(ValueError):
        g_eval_smoothed(0.0, 0.5, 0.5, make_alpha(), bases, 0.5, 0.0)


def test_population_moment_vanishes_at_truth():
    """Test E[g(Z, alpha0)] = 0 when h0 lies in the sieve."""
    oracle = build_oracle(DgpSpec(h0=TrueFunction.QUADRATIC))
    bases = population_bases(SPEC, oracle.weight)
    alpha0 = ParamPoint(theta=oracle.theta0, pi=project_truth(bases.h, oracle.h0.h))

    assert np.allclose(population_g(alpha0, oracle, bases, 0.5), 0.0, atol=1e-7)
    assert np.allclose(population_g_truth(oracle, bases, 0.5), 0.0, atol=1e-7)


def test_population_moment_saturates_under_large_shift():
    """Test that h far above h0 sends the instrument block to (1 - tau) E[q]."""
    tau = 0.3
    oracle = build_oracle(DgpSpec(tau=tau, h0=TrueFunction.QUADRATIC))
    bases = population_bases(SPEC, oracle.weight)
    pi = project_truth(bases.h, oracle.h0.h) + np.array([20.0, 0.0, 0.0])
    grid = oracle.joint_grid()
    expected = (1.0 - tau) * grid.expect(bases.q.eval(grid.x))

    g = population_g(ParamPoint(theta=oracle.theta0, pi=pi), oracle, bases, tau)
    assert np.allclose(g[1:], expected, atol=1e-10)


def test_population_moment_matches_monte_carlo():
    """Test quadrature moments against a large simulated sample."""
    spec = DgpSpec(tau=0.4, rho_e=0.6)
    oracle = build_oracle(spec)
    bases = population_bases(SPEC, oracle.weight)
    alpha = make_alpha(theta=0.5)
    data = simulate(spec, 200000, seed=9)

    assert np.allclose(population_g(alpha, oracle, bases, 0.4), g_bar(data, alpha, bases, 0.4), atol=0.01)


def test_population_second_moment_is_positive_definite():
    """Test the population H at a generic point."""
    oracle = build_oracle(DgpSpec())
    bases = population_bases(SPEC, oracle.weight)
    h = population_h(make_alpha(), oracle, bases, 0.5)

    assert np.allclose(h, h.T)
    assert np.linalg.eigvalsh(h)[0] > 0.0


@pytest.mark.parametrize("rho_e", [0.0, 0.5, 0.9])
def test_population_moment_is_stable_under_grid_doubling(rho_e):
    """Test that doubling the quadrature grid moves E[g] by less than 1e-7."""
    oracle = build_oracle(DgpSpec(rho_e=rho_e))
    bases = population_bases(SPEC, oracle.weight)
    projection = project_truth(bases.h, oracle.h0.h)
    rng = np.random.default_rng(3)
    for _ in range(5):
        alpha = ParamPoint(theta=oracle.theta0 + 0.1, pi=projection + 0.2 * rng.standard_normal(3))
        fine = population_g_converged(alpha, oracle, bases, 0.5)
        assert np.max(np.abs(fine - population_g(alpha, oracle, bases, 0.5))) < 1e-7
