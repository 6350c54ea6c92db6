"""Tests for QLR inference and the Riesz representer."""

import math
from dataclasses import replace

import numpy as np
import pytest

from psgel.domain.enums import Ingredients, TrueFunction
from psgel.domain.errors import ConfigurationError, RankDeficiencyError
from psgel.domain.models import Dataset, DgpSpec, FitConfig, ParamPoint, SieveSpec
from psgel.services.dgp_service import build_oracle, simulate
from psgel.services.estimator_service import ProfileCriterion, psgel_fit
from psgel.services.inference_service import (
    alr_check,
    build_m_l,
    ci_invert,
    conditional_residual_density,
    interval_from_riesz,
    qlr,
    qlr_statistic,
    riesz_bound_path,
    riesz_from_blocks,
    self_normalized_ci,
    vstar_norm_by_search,
)
from psgel.services.moment_service import build_bases, population_bases, population_jacobian
from psgel.services.sieve_service import build_q_basis, project_truth
from psgel.utils.numerics import chi2_critical_value, normal_quantile
from psgel.utils.report import qq_correlation, qq_rows


def make_config(**overrides) -> FitConfig:
    """Create a small, fast fit configuration."""
    defaults = {
        "sieve": SieveSpec(k_order=2, j_order=3),
        "multistart": 1,
        "stage_max_evals": 150,
        "bandwidth_multipliers": (2.0, 0.5),
    }
    defaults.update(overrides)
    return FitConfig(**defaults)


def make_fit(n: int = 200, seed: int = 0):
    """Create a sample, its bases and the unrestricted fit."""
    data = simulate(DgpSpec(), n, seed)
    config = make_config()
    bases = build_bases(config.sieve, data)
    return data, config, bases, psgel_fit(data, config, bases)


def make_riesz(m: float = 0.7, a: float = 1.3):
    """Create the two-parameter example with M = [[1, m], [0, a]] and H = I."""
    return riesz_from_blocks(np.array([[1.0, m], [0.0, a]]), np.eye(2))


def test_qlr_statistic_scaling():
    """Test QLR = 2 n (restricted - unrestricted)."""
    assert qlr_statistic(100, 0.03, 0.01) == pytest.approx(4.0)


def test_two_parameter_riesz_norm():
    """Test ||v*||^2 = 1 + m^2 / a^2 in the two-parameter example."""
    m, a = 0.7, 1.3
    riesz = make_riesz(m, a)

    assert riesz.vstar_norm**2 == pytest.approx(1.0 + m**2 / a**2, rel=1e-12)


def test_ustar_has_unit_weak_norm():
    """Test u* = v* / ||v*|| is normalized."""
    riesz = make_riesz()

    assert riesz.weak_norm(riesz.ustar) == pytest.approx(1.0, rel=1e-10)


def test_vstar_represents_theta():
    """Test <v*, a>_w = theta(a) for random directions."""
    rng = np.random.default_rng(0)
    jacobian = rng.standard_normal((5, 3))
    riesz = riesz_from_blocks(jacobian, np.eye(5) + 0.1 * np.ones((5, 5)))

    for _ in range(20):
        a = rng.standard_normal(3)
        assert riesz.weak_inner(riesz.vstar, a) == pytest.approx(a[0], rel=1e-8, abs=1e-10)


def test_rank_deficient_jacobian():
    """Test that a zero sieve column is a rank deficiency."""
    jacobian = np.array([[1.0, 0.0], [0.0, 0.0]])

    with pytest.raises(RankDeficiencyError):
        riesz_from_blocks(jacobian, np.eye(2))


def test_search_agrees_with_closed_form():
    """Test the direction search approaches ||v*|| from below."""
    riesz = make_riesz()
    searched = vstar_norm_by_search(riesz)

    assert searched <= riesz.vstar_norm * (1 + 1e-12)
    assert searched >= 0.999 * riesz.vstar_norm


def test_interval_from_riesz():
    """Test the Wald interval is centered and scales with ||v*||."""
    riesz = make_riesz()
    interval = interval_from_riesz(0.4, riesz, 400, 0.95)
    half = normal_quantile(0.95) * riesz.vstar_norm / 20.0

    assert interval.center == 0.4
    assert interval.lower == pytest.approx(0.4 - half)
    assert interval.upper == pytest.approx(0.4 + half)

    riesz.vstar_norm *= 2.0
    assert interval_from_riesz(0.4, riesz, 400, 0.95).width == pytest.approx(2.0 * interval.width)


def test_qlr_at_estimate_is_near_zero():
    """Test the QLR statistic at theta_hat is small and nonnegative."""
    data, config, bases, fit = make_fit()
    result = qlr(data, config, fit.theta_hat, unrestricted=fit, bases=bases)

    assert result.statistic >= 0.0
    assert result.statistic < chi2_critical_value(0.5)
    assert result.restricted.theta_hat == fit.theta_hat


def test_qlr_far_from_estimate_rejects():
    """Test that a distant null is rejected."""
    data, config, bases, fit = make_fit()
    result = qlr(data, config, fit.theta_hat + 2.0, unrestricted=fit, bases=bases)

    assert result.statistic > chi2_critical_value(0.99)
    assert result.pvalue < 0.01
    assert result.to_dict()["nu"] == pytest.approx(fit.theta_hat + 2.0)


def test_confidence_sets_are_nested():
    """Test the 0.99 set covers the 0.90 set and both contain theta_hat."""
    data, config, bases, fit = make_fit()
    grid = (fit.theta_hat + np.linspace(-1.0, 1.0, 5)).tolist()

    narrow = ci_invert(data, config, 0.90, grid, unrestricted=fit, bases=bases)
    wide = ci_invert(data, config, 0.99, grid, unrestricted=fit, bases=bases)

    assert narrow.contains(fit.theta_hat)
    assert wide.contains(fit.theta_hat)
    assert not narrow.empty
    assert min(lo for lo, _ in wide.intervals) <= min(lo for lo, _ in narrow.intervals) + 1e-3
    assert max(hi for _, hi in wide.intervals) >= max(hi for _, hi in narrow.intervals) - 1e-3
    assert fit.theta_hat in narrow.grid
    assert all(s >= 0.0 for s in narrow.statistics)


def test_ci_rejects_invalid_level():
    """Test that a level outside (0, 1) is a configuration error."""
    data, config, bases, fit = make_fit(n=50)

    with pytest.raises(ConfigurationError):
        ci_invert(data, config, 1.5, unrestricted=fit, bases=bases)


def test_plug_in_interval_is_centered_at_estimate():
    """Test the self-normalized plug-in interval."""
    data, config, bases, fit = make_fit()
    interval, riesz = self_normalized_ci(data, config, 0.95, Ingredients.PLUG_IN, fit=fit, bases=bases)

    assert interval.center == fit.theta_hat
    assert interval.width > 0.0
    assert math.isfinite(riesz.vstar_norm)
    assert riesz.ingredients == "plug_in"


def test_oracle_ingredients_need_an_oracle():
    """Test that oracle mode without an oracle is a configuration error."""
    data, config, bases, fit = make_fit(n=50)

    with pytest.raises(ConfigurationError):
        build_m_l(fit.alpha_hat, Ingredients.ORACLE, bases, 0.5)


def test_oracle_information_is_positive_definite():
    """Test the oracle weak-norm Gram and the representer property."""
    oracle = build_oracle(DgpSpec(h0=TrueFunction.QUADRATIC))
    bases = population_bases(SieveSpec(k_order=3, j_order=5), oracle.weight)
    alpha = ParamPoint(theta=oracle.theta0, pi=project_truth(bases.h, oracle.h0.h))
    riesz = build_m_l(alpha, Ingredients.ORACLE, bases, 0.5, oracle=oracle)

    assert np.linalg.eigvalsh(riesz.information)[0] > 0.0
    assert riesz.vstar_norm > 0.0
    e2 = np.zeros(4)
    e2[2] = 1.0
    assert riesz.weak_inner(riesz.vstar, e2) == pytest.approx(0.0, abs=1e-8)


def test_alr_terms_are_consistent():
    """Test the ALR left side is the standardized estimation error."""
    oracle = build_oracle(DgpSpec())
    data = simulate(oracle.spec, 200, 1)
    terms = alr_check(data, make_config(), oracle)

    assert terms["lhs"] == pytest.approx((terms["thetaHat"] - terms["thetaL0"]) / terms["vstarNorm"])
    assert terms["scaledGap"] == pytest.approx(math.sqrt(200) * (terms["lhs"] - terms["rhs"]))
    assert terms["influenceSd"] > 0.0


def test_riesz_bound_path_rows():
    """Test one oracle representer row per sieve order."""
    oracle = build_oracle(DgpSpec())
    rows = riesz_bound_path(oracle, make_config(), [2, 3])

    assert [row["k"] for row in rows] == [2, 3]
    assert [row["j"] for row in rows] == [3, 3]
    assert all(row["vstarNormSq"] is None or row["vstarNormSq"] > 0.0 for row in rows)
    assert all(row["v0"] is None for row in rows)


@pytest.mark.parametrize("scale", [4.0, 0.25])
def test_qlr_ignores_instrument_scale(scale):
    """Test that a common constant on every instrument leaves QLR unchanged."""
    data, config, bases, _ = make_fit()
    scaled = replace(bases, q=build_q_basis(config.sieve, data, scale=scale))
    nu = 0.4

    plain = qlr(data, config, nu, bases=bases)
    rescaled = qlr(data, config, nu, bases=scaled)
    assert rescaled.statistic == pytest.approx(plain.statistic, rel=1e-8, abs=1e-8)


@pytest.mark.parametrize("scale", [3.0, -1.5])
def test_profile_criterion_ignores_instrument_scale(scale):
    """Test the profiled criterion at fixed points under any nonzero instrument scale."""
    data, config, bases, fit = make_fit(n=120)
    scaled = replace(bases, q=build_q_basis(config.sieve, data, scale=scale))
    plain_criterion = ProfileCriterion(data, config, bases)
    scaled_criterion = ProfileCriterion(data, config, scaled)

    for alpha in (fit.alpha_hat, fit.alpha_hat.with_theta(fit.theta_hat + 0.2)):
        assert scaled_criterion.value(alpha) == pytest.approx(plain_criterion.value(alpha), rel=1e-10)


def test_pooled_multistarts_match_serial():
    """Test that multistarts on two worker processes reproduce the serial fit exactly."""
    data = simulate(DgpSpec(), 150, 2)
    serial = psgel_fit(data, make_config(multistart=3))
    pooled = psgel_fit(data, make_config(multistart=3, workers=2))

    assert pooled.alpha_hat.vector.tolist() == serial.alpha_hat.vector.tolist()
    assert pooled.criterion == serial.criterion
    assert pooled.trace == serial.trace
    assert pooled.provenance["startValues"] == serial.provenance["startValues"]
    assert pooled.provenance["rejected"] == serial.provenance["rejected"]


def test_pooled_inversion_matches_serial():
    """Test that grid points evaluated on worker processes give the serial confidence set."""
    data, config, bases, fit = make_fit(n=120)
    grid = np.linspace(fit.theta_hat - 0.5, fit.theta_hat + 0.5, 5).tolist()
    serial = ci_invert(data, config, 0.9, grid, unrestricted=fit, bases=bases)
    pooled = ci_invert(data, replace(config, workers=2), 0.9, grid, unrestricted=fit, bases=bases)

    assert pooled.intervals == serial.intervals
    assert pooled.statistics == serial.statistics


def test_conditional_density_tracks_heteroskedastic_residuals():
    """Test that the kernel density at zero follows a residual scale that varies with X."""
    rng = np.random.default_rng(7)
    n = 3000
    x = rng.uniform(size=n)
    w = rng.uniform(size=n)
    scale = 0.3 + 1.5 * x
    residual = scale * rng.standard_normal(n)
    estimate = conditional_residual_density(residual, w, x)
    truth = 1.0 / (math.sqrt(2.0 * math.pi) * scale)

    assert np.all(estimate > 0.0)
    assert np.corrcoef(estimate, truth)[0, 1] > 0.8
    # low-noise observations carry more density than high-noise ones
    assert estimate[x < 0.2].mean() > 2.0 * estimate[x > 0.8].mean()


def test_plug_in_density_block_tracks_the_oracle_block():
    """Test the plug-in p_{Y|WX} block against quadrature under strong endogeneity."""
    spec = DgpSpec(rho_e=0.9)
    oracle = build_oracle(spec)
    data = simulate(spec, 2000, 11)
    config = make_config(sieve=SieveSpec(k_order=3, j_order=4))
    bases = build_bases(config.sieve, data, oracle.weight)
    alpha = ParamPoint(theta=oracle.theta0, pi=project_truth(bases.h, oracle.h0.h))

    plug_in = build_m_l(alpha, Ingredients.PLUG_IN, bases, 0.5, data=data).g_jacobian[1:, 1:]
    expected = population_jacobian(alpha, oracle, bases, 0.5)[1:, 1:]
    assert np.linalg.norm(plug_in - expected) <= 0.15 * np.linalg.norm(expected)


@pytest.mark.slow
def test_qlr_size_under_the_null():
    """Test the QLR rejection rate at 5% and the chi-square QQ fit over 500 replications."""
    spec = DgpSpec()
    theta0 = build_oracle(spec).theta0
    config = FitConfig(sieve=SieveSpec(k_order=3))
    statistics = [qlr(simulate(spec, 500, seed), config, theta0).statistic for seed in range(500)]
    rate = np.mean(np.asarray(statistics) > chi2_critical_value(0.95))

    assert config.sieve.j == 5
    assert 0.02 <= rate <= 0.10
    assert qq_correlation(qq_rows(statistics)) > 0.95
