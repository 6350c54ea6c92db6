"""Tests for the simulation design and its oracle."""

import math

import numpy as np
import pytest
from scipy import integrate

from psgel.domain.enums import TrueFunction
from psgel.domain.errors import IngestionError, OracleError
from psgel.domain.models import DgpSpec, WeightFn
from psgel.repository.dataset_csv import load_csv, write_csv
from psgel.services.dgp_service import (
    build_oracle,
    oracle_theta0,
    simulate,
    theta0_by_parts,
    true_function,
)


def make_spec(**overrides) -> DgpSpec:
    """Create a design for tests."""
    defaults = {"tau": 0.5, "h0": TrueFunction.QUADRATIC, "a": 1.0, "rho_e": 0.5, "sigma": 1.0, "b": 1.0}
    defaults.update(overrides)
    return DgpSpec(**defaults)


def test_simulate_is_deterministic():
    """Test that equal seeds give identical data."""
    first = simulate(make_spec(), 50, seed=7)
    second = simulate(make_spec(), 50, seed=7)
    other = simulate(make_spec(), 50, seed=8)

    assert np.array_equal(first.y, second.y)
    assert np.array_equal(first.w, second.w)
    assert not np.array_equal(first.y, other.y)


def test_simulate_support():
    """Test that W and X lie in the unit interval."""
    data = simulate(make_spec(), 1000, seed=1)

    assert data.n == 1000
    assert np.all((data.w >= 0.0) & (data.w <= 1.0))
    assert np.all((data.x >= 0.0) & (data.x <= 1.0))


@pytest.mark.parametrize("tau", [0.25, 0.5, 0.75])
def test_quantile_restriction_holds_within_bins(tau):
    """Test that P(Y <= h0(W) | X) = tau within X quintiles."""
    spec = make_spec(tau=tau, rho_e=0.8)
    data = simulate(spec, 20000, seed=3)
    below = data.y <= true_function(spec.h0).h(data.w)
    bins = np.minimum((data.x * 5).astype(int), 4)

    for b in range(5):
        assert below[bins == b].mean() == pytest.approx(tau, abs=0.035)


def test_theta0_constant_is_zero():
    """Test that a constant h0 has zero average derivative."""
    assert oracle_theta0(make_spec(h0=TrueFunction.CONSTANT)) == pytest.approx(0.0, abs=1e-12)


def test_theta0_linear_matches_monte_carlo():
    """Test theta0 = E[mu(W)] for a linear h0."""
    spec = make_spec(h0=TrueFunction.LINEAR)
    data = simulate(spec, 200000, seed=5)

    assert oracle_theta0(spec) == pytest.approx(WeightFn.default().mu(data.w).mean(), abs=0.01)


def test_theta0_quadratic_matches_monte_carlo():
    """Test theta0 = E[2 mu(W) W] for a quadratic h0."""
    spec = make_spec()
    data = simulate(spec, 200000, seed=6)
    mc = np.mean(WeightFn.default().mu(data.w) * 2.0 * data.w)

    assert oracle_theta0(spec) == pytest.approx(mc, abs=0.01)


@pytest.mark.parametrize("h0", [TrueFunction.LINEAR, TrueFunction.QUADRATIC, TrueFunction.SINE])
def test_theta0_by_parts_agrees(h0):
    """Test the integration-by-parts form of theta0."""
    oracle = build_oracle(make_spec(h0=h0, a=0.8, b=1.2))

    assert theta0_by_parts(oracle) == pytest.approx(oracle.theta0, abs=1e-6)


def test_build_oracle_requires_mixing():
    """Test that b = 0 has no oracle densities."""
    with pytest.raises(OracleError):
        build_oracle(make_spec(b=0.0))


def test_oracle_pdf_w_integrates_to_one():
    """Test the marginal density of W."""
    oracle = build_oracle(make_spec(a=0.6, b=0.6))
    w = np.linspace(1e-4, 1.0 - 1e-4, 20001)

    assert integrate.trapezoid(oracle.pdf_w(w), w) == pytest.approx(1.0, abs=1e-3)


def test_oracle_conditional_cdf_at_truth():
    """Test P(Y <= h0(W) | W, X) integrates to tau over the latent V."""
    spec = make_spec(tau=0.3)
    oracle = build_oracle(spec)
    grid = oracle.joint_grid()
    cdf = oracle.cond_cdf_y_latent(oracle.h0.h(grid.w), grid.w, grid.v)

    assert grid.expect(cdf) == pytest.approx(0.3, abs=1e-10)


def test_joint_grid_weights_sum_to_one():
    """Test that the joint quadrature is a probability measure."""
    grid = build_oracle(make_spec()).joint_grid(nx=16, nv=16)

    assert grid.weight.sum() == pytest.approx(1.0, abs=1e-12)
    assert len(grid.w) == 256


def test_csv_round_trip(tmp_path):
    """Test writing and reloading a dataset."""
    data = simulate(make_spec(), 25, seed=2)
    path = write_csv(data, tmp_path / "data.csv")
    loaded = load_csv(path)

    assert np.array_equal(loaded.y, data.y)
    assert np.array_equal(loaded.w, data.w)
    assert np.array_equal(loaded.x, data.x)


def test_csv_reports_row_of_nan(tmp_path):
    """Test that a NaN entry is reported with its row."""
    path = tmp_path / "bad.csv"
    path.write_text("y,w,x\n1.0,0.5,0.5\nNaN,0.2,0.3\n", encoding="utf-8")

    with pytest.raises(IngestionError, match="row 2"):
        load_csv(path)


def test_csv_reports_unparseable_entry(tmp_path):
    """Test that a non-numeric entry is reported with its row."""
    path = tmp_path / "bad.csv"
    path.write_text("y,w,x\n1.0,0.5,abc\n", encoding="utf-8")

    with pytest.raises(IngestionError, match="row 1"):
        load_csv(path)


def test_csv_missing_file(tmp_path):
    """Test that a missing file is an ingestion error."""
    with pytest.raises(IngestionError):
        load_csv(tmp_path / "nope.csv")


def test_csv_missing_column(tmp_path):
    """Test that a missing column is an ingestion error."""
    path = tmp_path / "bad.csv"
    path.write_text("y,w\n1.0,0.5\n", encoding="utf-8")

    with pytest.raises(IngestionError, match="missing columns"):
        load_csv(path)


def test_true_function_derivatives():
    """Test shipped h0 derivatives against finite differences."""
    w = np.linspace(0.1, 0.9, 9)
    step = 1e-6
    for kind in TrueFunction:
        f = true_function(kind)
        numeric = (f.h(w + step) - f.h(w - step)) / (2 * step)
        assert np.allclose(f.dh(w), numeric, atol=1e-6)
        numeric2 = (f.dh(w + step) - f.dh(w - step)) / (2 * step)
        assert np.allclose(f.d2h(w), numeric2, atol=1e-5)
    assert math.isclose(float(true_function(TrueFunction.SINE).h(np.array([0.5]))[0]), 1.0)
