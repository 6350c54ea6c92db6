"""Moment vector g_J(z, alpha), its sample and population averages, and H_J."""

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import special

from psgel.domain.errors import NumericalError
from psgel.domain.models import Dataset, ParamPoint, SieveSpec, WeightFn
from psgel.services.dgp_service import JointGrid, Oracle
from psgel.services.sieve_service import (
    HBasis,
    QBasis,
    build_h_basis,
    build_q_basis,
    penalty_matrix,
    population_q_basis,
)
from psgel.utils.numerics import tree_mean, tree_outer_mean

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Bases:
    """Everything needed to evaluate g_J and the penalty for a given sieve."""

    h: HBasis
    q: QBasis
    weight: WeightFn
    penalty: np.ndarray = field(repr=False)
    gamma_k: float = 0.0

    @property
    def j(self) -> int:
        return self.q.j

    @property
    def k(self) -> int:
        return self.h.k

    @property
    def dim(self) -> int:
        """Length of the moment vector, J + 1."""
        return self.q.j + 1


def build_bases(spec: SieveSpec, data: Dataset, weight: Optional[WeightFn] = None) -> Bases:
    """Bases with the instrument basis whitened on ``data``."""
    hb = build_h_basis(spec)
    return Bases(
        h=hb,
        q=build_q_basis(spec, data),
        weight=weight or WeightFn.default(),
        penalty=penalty_matrix(spec, hb),
        gamma_k=spec.gamma_k,
    )


def population_bases(spec: SieveSpec, weight: Optional[WeightFn] = None) -> Bases:
    """Bases with the instrument basis whitened under X ~ U(0, 1)."""
    hb = build_h_basis(spec)
    return Bases(
        h=hb,
        q=population_q_basis(spec),
        weight=weight or WeightFn.default(),
        penalty=penalty_matrix(spec, hb),
        gamma_k=spec.gamma_k,
    )


@dataclass(frozen=True)
class MomentDesign:
    """Basis evaluations at the observations, computed once per fit."""

    y: np.ndarray
    phi: np.ndarray
    dphi: np.ndarray
    q: np.ndarray
    mu_w: np.ndarray

    @property
    def n(self) -> int:
        return len(self.y)

    @classmethod
    def from_data(cls, data: Dataset, bases: Bases) -> "MomentDesign":
        return cls(
            y=data.y,
            phi=bases.h.eval(data.w),
            dphi=bases.h.deriv(data.w),
            q=bases.q.eval(data.x),
            mu_w=bases.weight.mu(data.w),
        )


def _indicator_residual(y: np.ndarray, h: np.ndarray, tau: float, bandwidth: float) -> np.ndarray:
    if bandwidth > 0.0:
        return special.ndtr((h - y) / bandwidth) - tau
    return (y <= h).astype(float) - tau


def g_matrix(design: MomentDesign, alpha: ParamPoint, tau: float, bandwidth: float = 0.0) -> np.ndarray:
    """
    (n, J+1) matrix whose rows are g_J(Z_i, alpha).

    Args:
        design: Precomputed basis evaluations
        alpha: Parameter point
        tau: Quantile level
        bandwidth: 0 for the exact indicator, otherwise the Gaussian-CDF smoothing scale

    Returns:
        Column 0 holds rho1 = theta - mu(W) h'(W); columns 1..J hold rho2 * q^J(X)
    """
    h = design.phi @ alpha.pi
    rho1 = alpha.theta - design.mu_w * (design.dphi @ alpha.pi)
    rho2 = _indicator_residual(design.y, h, tau, bandwidth)
    return np.column_stack((rho1, rho2[:, None] * design.q))


def smoothed_rho2_jacobian(
    design: MomentDesign, alpha: ParamPoint, bandwidth: float
) -> np.ndarray:
    """(n, K) derivative of the smoothed rho2 with respect to pi."""
    h = design.phi @ alpha.pi
    density = np.exp(-0.5 * ((h - design.y) / bandwidth) ** 2) / (np.sqrt(2.0 * np.pi) * bandwidth)
    return density[:, None] * design.phi


def g_eval(
    y: np.ndarray,
    w: np.ndarray,
    x: np.ndarray,
    alpha: ParamPoint,
    bases: Bases,
    tau: float,
) -> np.ndarray:
    """Moment vectors at one or many observations, exact indicator."""
    scalar = np.ndim(y) == 0
    y, w, x = (np.atleast_1d(np.asarray(v, dtype=float)) for v in (y, w, x))
    design = MomentDesign(
        y=y, phi=bases.h.eval(w), dphi=bases.h.deriv(w), q=bases.q.eval(x), mu_w=bases.weight.mu(w)
    )
    g = g_matrix(design, alpha, tau)
    return g[0] if scalar else g


def g_eval_smoothed(
    y: np.ndarray,
    w: np.ndarray,
    x: np.ndarray,
    alpha: ParamPoint,
    bases: Bases,
    tau: float,
    bandwidth: float,
) -> np.ndarray:
    """Moment vectors with 1{y <= h(w)} replaced by Phi((h(w) - y) / bandwidth)."""
    if not bandwidth > 0.0:
        raise ValueError(f"bandwidth must be positive, got {bandwidth}")
    scalar = np.ndim(y) == 0
    y, w, x = (np.atleast_1d(np.asarray(v, dtype=float)) for v in (y, w, x))
    design = MomentDesign(
        y=y, phi=bases.h.eval(w), dphi=bases.h.deriv(w), q=bases.q.eval(x), mu_w=bases.weight.mu(w)
    )
    g = g_matrix(design, alpha, tau, bandwidth)
    return g[0] if scalar else g


def g_bar(data: Dataset, alpha: ParamPoint, bases: Bases, tau: float) -> np.ndarray:
    """Sample mean of g_J(Z_i, alpha)."""
    return tree_mean(g_matrix(MomentDesign.from_data(data, bases), alpha, tau))


def h_mat(data: Dataset, alpha: ParamPoint, bases: Bases, tau: float) -> np.ndarray:
    """Sample second-moment matrix (1/n) sum g_i g_i'."""
    return tree_outer_mean(g_matrix(MomentDesign.from_data(data, bases), alpha, tau))


@dataclass(frozen=True)
class PopulationDesign:
    """Basis and oracle evaluations on the joint quadrature grid."""

    grid: JointGrid
    phi: np.ndarray
    dphi: np.ndarray
    q: np.ndarray
    mu_w: np.ndarray

    @classmethod
    def build(cls, oracle: Oracle, bases: Bases, grid: Optional[JointGrid] = None) -> "PopulationDesign":
        grid = grid or oracle.joint_grid()
        return cls(
            grid=grid,
            phi=bases.h.eval(grid.w),
            dphi=bases.h.deriv(grid.w),
            q=bases.q.eval(grid.x),
            mu_w=bases.weight.mu(grid.w),
        )


def _population_parts(
    oracle: Oracle, pd: PopulationDesign, theta: float, h: np.ndarray, dh: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """rho1 and F_{Y|WX}(h(W)) on the grid."""
    rho1 = theta - pd.mu_w * dh
    cdf = oracle.cond_cdf_y_latent(h, pd.grid.w, pd.grid.v)
    return rho1, cdf


def _population_mean(rho1: np.ndarray, cdf: np.ndarray, pd: PopulationDesign, tau: float) -> np.ndarray:
    expect = pd.grid.expect
    return np.concatenate(([expect(rho1)], expect((cdf - tau)[:, None] * pd.q)))


def _population_second_moment(
    rho1: np.ndarray, cdf: np.ndarray, pd: PopulationDesign, tau: float
) -> np.ndarray:
    # E[rho2 | W, X] = F - tau and E[rho2^2 | W, X] = (1 - 2 tau) F + tau^2
    expect = pd.grid.expect
    j = pd.q.shape[1]
    out = np.empty((j + 1, j + 1))
    out[0, 0] = expect(rho1**2)
    cross = expect((rho1 * (cdf - tau))[:, None] * pd.q)
    out[0, 1:] = cross
    out[1:, 0] = cross
    second = (1.0 - 2.0 * tau) * cdf + tau**2
    out[1:, 1:] = pd.q.T @ (pd.q * (pd.grid.weight * second)[:, None])
    return 0.5 * (out + out.T)


def population_g(
    alpha: ParamPoint,
    oracle: Oracle,
    bases: Bases,
    tau: float,
    design: Optional[PopulationDesign] = None,
) -> np.ndarray:
    """E_P[g_J(Z, alpha)] by tensor-grid quadrature."""
    pd = design or PopulationDesign.build(oracle, bases)
    rho1, cdf = _population_parts(oracle, pd, alpha.theta, pd.phi @ alpha.pi, pd.dphi @ alpha.pi)
    return _population_mean(rho1, cdf, pd, tau)


def population_h(
    alpha: ParamPoint,
    oracle: Oracle,
    bases: Bases,
    tau: float,
    design: Optional[PopulationDesign] = None,
) -> np.ndarray:
    """H_J(alpha, P) = E_P[g_J g_J'] by tensor-grid quadrature."""
    pd = design or PopulationDesign.build(oracle, bases)
    rho1, cdf = _population_parts(oracle, pd, alpha.theta, pd.phi @ alpha.pi, pd.dphi @ alpha.pi)
    return _population_second_moment(rho1, cdf, pd, tau)


def population_g_truth(
    oracle: Oracle, bases: Bases, tau: float, design: Optional[PopulationDesign] = None
) -> np.ndarray:
    """E_P[g_J(Z, alpha0)] at the true (theta0, h0), whether or not h0 is in the sieve."""
    pd = design or PopulationDesign.build(oracle, bases)
    w = pd.grid.w
    rho1, cdf = _population_parts(oracle, pd, oracle.theta0, oracle.h0.h(w), oracle.h0.dh(w))
    return _population_mean(rho1, cdf, pd, tau)


def population_h_truth(
    oracle: Oracle, bases: Bases, tau: float, design: Optional[PopulationDesign] = None
) -> np.ndarray:
    """H_J(alpha0, P) at the true (theta0, h0)."""
    pd = design or PopulationDesign.build(oracle, bases)
    w = pd.grid.w
    rho1, cdf = _population_parts(oracle, pd, oracle.theta0, oracle.h0.h(w), oracle.h0.dh(w))
    return _population_second_moment(rho1, cdf, pd, tau)


def population_jacobian(
    alpha: ParamPoint,
    oracle: Oracle,
    bases: Bases,
    tau: float,
    design: Optional[PopulationDesign] = None,
) -> np.ndarray:
    """
    (J+1, K+1) derivative of E_P[g_J(Z, alpha)] in (theta, pi).

    Top-left 1, top-right -E[mu(W) phi'(W)] (which equals int l phi dw),
    bottom-left 0, bottom-right E[p_{Y|WX}(h(W) | W, X) q^J(X) phi^K(W)'].
    """
    pd = design or PopulationDesign.build(oracle, bases)
    grid = pd.grid
    h = pd.phi @ alpha.pi
    density = oracle.cond_pdf_y_latent(h, grid.w, grid.v)
    j, k = pd.q.shape[1], pd.phi.shape[1]
    out = np.zeros((j + 1, k + 1))
    out[0, 0] = 1.0
    out[0, 1:] = -grid.expect(pd.mu_w[:, None] * pd.dphi)
    out[1:, 1:] = pd.q.T @ (pd.phi * (grid.weight * density)[:, None])
    return out


def population_g_converged(
    alpha: ParamPoint, oracle: Oracle, bases: Bases, tau: float, tolerance: float = 1e-7
) -> np.ndarray:
    """
    population_g with a grid-doubling check.

    Raises:
        NumericalError: doubling both axes of the default grid moves an entry by more than ``tolerance``
    """
    coarse = population_g(alpha, oracle, bases, tau)
    fine_grid = oracle.joint_grid(nx=2 * 48, nv=2 * 48)
    fine = population_g(alpha, oracle, bases, tau, PopulationDesign.build(oracle, bases, fine_grid))
    change = float(np.max(np.abs(fine - coarse)))
    logger.debug("population moment grid-doubling change %.3g", change)
    if change > tolerance:
        raise NumericalError("population moment quadrature did not converge", change)
    return fine


class MomentService:
    """Sieve bases and sample or population moments."""

    build_bases = staticmethod(build_bases)
    population_bases = staticmethod(population_bases)
    g_bar = staticmethod(g_bar)
    h_mat = staticmethod(h_mat)
