"""Synthetic quantile IV designs, their oracle quantities, and dataset ingestion.

The design is a Gaussian-copula triangular system on W in (0, 1):

    X ~ U(0, 1),  V, e ~ N(0, 1) independent
    W = Phi(a * Phi^-1(X) + b * V)
    U = rho_e * V + sqrt(1 - rho_e^2) * e
    Y = h0(W) + sigma * (U - z_tau)

U is independent of X, so P(Y <= h0(W) | X) = P(U <= z_tau) = tau exactly.
Writing S = Phi^-1(W) ~ N(0, a^2 + b^2), every density the bound and the
oracle Jacobian need has a closed form.
"""

import logging
import math
from dataclasses import dataclass
from functools import cached_property
from typing import Callable, Optional

import numpy as np
from scipy import integrate, special

from psgel.domain.enums import TrueFunction
from psgel.domain.errors import ConfigurationError, NumericalError, OracleError
from psgel.domain.models import Dataset, DgpSpec, WeightFn
from psgel.repository.dataset_csv import load_csv, write_csv
from psgel.utils.numerics import gauss_hermite_normal

logger = logging.getLogger(__name__)

QUADRATURE_TOLERANCE = 1e-8
# |Phi^-1(W)| beyond this is below double resolution of 1 - W
LATENT_LIMIT = 8.0

__all__ = [
    "JointGrid",
    "Oracle",
    "TrueFunctionSpec",
    "build_oracle",
    "load_csv",
    "oracle_theta0",
    "simulate",
    "theta0_by_parts",
    "true_function",
    "write_csv",
]


@dataclass(frozen=True)
class TrueFunctionSpec:
    """h0 with closed-form first and second derivatives."""

    h: Callable[[np.ndarray], np.ndarray]
    dh: Callable[[np.ndarray], np.ndarray]
    d2h: Callable[[np.ndarray], np.ndarray]


def _zeros(w: np.ndarray) -> np.ndarray:
    return np.zeros_like(np.asarray(w, dtype=float))


def _ones(w: np.ndarray) -> np.ndarray:
    return np.ones_like(np.asarray(w, dtype=float))


_TRUE_FUNCTIONS = {
    TrueFunction.CONSTANT: TrueFunctionSpec(h=_ones, dh=_zeros, d2h=_zeros),
    TrueFunction.LINEAR: TrueFunctionSpec(
        h=lambda w: np.asarray(w, dtype=float), dh=_ones, d2h=_zeros
    ),
    TrueFunction.QUADRATIC: TrueFunctionSpec(
        h=lambda w: np.asarray(w, dtype=float) ** 2,
        dh=lambda w: 2.0 * np.asarray(w, dtype=float),
        d2h=lambda w: 2.0 * _ones(w),
    ),
    TrueFunction.SINE: TrueFunctionSpec(
        h=lambda w: np.sin(np.pi * np.asarray(w, dtype=float)),
        dh=lambda w: np.pi * np.cos(np.pi * np.asarray(w, dtype=float)),
        d2h=lambda w: -(np.pi**2) * np.sin(np.pi * np.asarray(w, dtype=float)),
    ),
}


def true_function(kind: TrueFunction) -> TrueFunctionSpec:
    """Look up a shipped h0."""
    return _TRUE_FUNCTIONS[TrueFunction(kind)]


def simulate(spec: DgpSpec, n: int, seed: int) -> Dataset:
    """
    Draw n observations from the design.

    Args:
        spec: Design parameters
        n: Sample size (>= 1)
        seed: Seed of the numpy Generator; identical inputs give identical data

    Returns:
        Dataset with W in [0, 1]
    """
    spec.validate()
    if n < 1:
        raise ConfigurationError(f"sample size must be >= 1, got {n}")

    rng = np.random.default_rng(seed)
    x = rng.random(n)
    v = rng.standard_normal(n)
    e = rng.standard_normal(n)

    index = spec.a * special.ndtri(np.clip(x, 1e-16, 1.0 - 1e-16)) + spec.b * v
    w = special.ndtr(index)
    u = spec.rho_e * v + math.sqrt(1.0 - spec.rho_e**2) * e
    z_tau = float(special.ndtri(spec.tau))
    y = true_function(spec.h0).h(w) + spec.sigma * (u - z_tau)
    return Dataset(y=y, w=w, x=x)


@dataclass(frozen=True)
class JointGrid:
    """Tensor quadrature over (X, V) with X = Phi(xi); Gauss-Hermite in xi and V."""

    x: np.ndarray
    v: np.ndarray
    w: np.ndarray
    weight: np.ndarray
    nx: int
    nv: int

    def expect(self, values: np.ndarray) -> np.ndarray:
        """E[f(X, V)] for values laid out on the grid (leading axis = grid points)."""
        return np.tensordot(self.weight, values, axes=(0, 0))


@dataclass(frozen=True)
class Oracle:
    """Exact densities and functionals of a simulation design."""

    spec: DgpSpec
    weight: WeightFn
    theta0: float

    @cached_property
    def sigma_s(self) -> float:
        """Standard deviation of S = Phi^-1(W)."""
        return math.hypot(self.spec.a, self.spec.b)

    @cached_property
    def z_tau(self) -> float:
        return float(special.ndtri(self.spec.tau))

    @cached_property
    def h0(self) -> TrueFunctionSpec:
        return true_function(self.spec.h0)

    def _latent_s(self, w: np.ndarray) -> np.ndarray:
        return special.ndtri(np.asarray(w, dtype=float))

    def dlog_pdf_w_from_s(self, s: np.ndarray) -> np.ndarray:
        """d/dw log p_W at W = Phi(s)."""
        s = np.asarray(s, dtype=float)
        phi = np.exp(-0.5 * s**2) / math.sqrt(2.0 * math.pi)
        return s * (1.0 - 1.0 / self.sigma_s**2) / phi

    def pdf_w(self, w: np.ndarray) -> np.ndarray:
        """Marginal density of W."""
        s = self._latent_s(w)
        log_pdf = -0.5 * s**2 / self.sigma_s**2 + 0.5 * s**2 - math.log(self.sigma_s)
        return np.exp(log_pdf)

    def dpdf_w(self, w: np.ndarray) -> np.ndarray:
        """Derivative of the marginal density of W."""
        return self.pdf_w(w) * self.dlog_pdf_w_from_s(self._latent_s(w))

    def latent_v(self, w: np.ndarray, x: np.ndarray) -> np.ndarray:
        """The V that maps X = x to W = w."""
        s = self._latent_s(w)
        return (s - self.spec.a * special.ndtri(np.asarray(x, dtype=float))) / self.spec.b

    def cond_pdf_w_given_x(self, w: np.ndarray, x: np.ndarray) -> np.ndarray:
        """p_{W|X}(w | x)."""
        s = self._latent_s(w)
        v = self.latent_v(w, x)
        log_pdf = -0.5 * v**2 + 0.5 * s**2 - math.log(self.spec.b)
        return np.exp(log_pdf)

    def _standardized_residual(self, y, w, v) -> np.ndarray:
        u = (np.asarray(y, dtype=float) - self.h0.h(w)) / self.spec.sigma + self.z_tau
        return (u - self.spec.rho_e * v) / math.sqrt(1.0 - self.spec.rho_e**2)

    def cond_cdf_y_latent(self, y: np.ndarray, w: np.ndarray, v: np.ndarray) -> np.ndarray:
        """P(Y <= y | W = w, V = v); (W, V) determine X."""
        return special.ndtr(self._standardized_residual(y, w, v))

    def cond_pdf_y_latent(self, y: np.ndarray, w: np.ndarray, v: np.ndarray) -> np.ndarray:
        """p_{Y|WX}(y | w, x) written through the latent V."""
        z = self._standardized_residual(y, w, v)
        scale = self.spec.sigma * math.sqrt(1.0 - self.spec.rho_e**2)
        return np.exp(-0.5 * z**2) / (math.sqrt(2.0 * math.pi) * scale)

    def cond_cdf_y(self, y: np.ndarray, w: np.ndarray, x: np.ndarray) -> np.ndarray:
        """P(Y <= y | W = w, X = x)."""
        return self.cond_cdf_y_latent(y, w, self.latent_v(w, x))

    def cond_pdf_y(self, y: np.ndarray, w: np.ndarray, x: np.ndarray) -> np.ndarray:
        """p_{Y|WX}(y | w, x)."""
        return self.cond_pdf_y_latent(y, w, self.latent_v(w, x))

    def ell(self, w: np.ndarray) -> np.ndarray:
        """l(w) = mu'(w) p_W(w) + mu(w) p_W'(w)."""
        return self.weight.dmu(w) * self.pdf_w(w) + self.weight.mu(w) * self.dpdf_w(w)

    def ell_over_pdf(self, w: np.ndarray) -> np.ndarray:
        """l / p_W, the L2(P_W) representer of g -> int l g dw."""
        w = np.asarray(w, dtype=float)
        return self.weight.dmu(w) + self.weight.mu(w) * self.dlog_pdf_w_from_s(self._latent_s(w))

    def joint_grid(self, nx: int = 48, nv: int = 48) -> JointGrid:
        """Quadrature grid for expectations over the joint law of (X, W, V).

        X = Phi(xi) with xi ~ N(0, 1), so both axes use Gauss-Hermite nodes and
        every integrand is smooth in the latent coordinates.
        """
        xi_nodes, x_weights = gauss_hermite_normal(nx)
        x_nodes = special.ndtr(xi_nodes)
        v_nodes, v_weights = gauss_hermite_normal(nv)
        x = np.repeat(x_nodes, nv)
        v = np.tile(v_nodes, nx)
        weight = np.repeat(x_weights, nv) * np.tile(v_weights, nx)
        w = special.ndtr(self.spec.a * np.repeat(xi_nodes, nv) + self.spec.b * v)
        return JointGrid(x=x, v=v, w=w, weight=weight, nx=nx, nv=nv)


def _expect_over_w(spec: DgpSpec, integrand: Callable[[np.ndarray, np.ndarray], np.ndarray]) -> tuple[float, float]:
    """E[f(W)] via S = Phi^-1(W) = sigma_s * Z, Z ~ N(0, 1); integrand gets (w, s)."""
    sigma_s = math.hypot(spec.a, spec.b)
    if sigma_s == 0.0:
        w = np.array([0.5])
        return float(integrand(w, np.zeros(1))[0]), 0.0

    limit = min(LATENT_LIMIT / sigma_s, 10.0)

    def f(z: float) -> float:
        s = np.array([sigma_s * z])
        w = special.ndtr(s)
        return float(integrand(w, s)[0]) * math.exp(-0.5 * z * z) / math.sqrt(2.0 * math.pi)

    value, error = integrate.quad(f, -limit, limit, epsabs=1e-13, epsrel=1e-12, limit=400)
    return value, error


def oracle_theta0(spec: DgpSpec, mu: Optional[WeightFn] = None) -> float:
    """
    theta0 = E[mu(W) h0'(W)] by adaptive quadrature.

    Raises:
        NumericalError: the quadrature error estimate exceeds 1e-8
    """
    spec.validate()
    mu = mu or WeightFn.default()
    h0 = true_function(spec.h0)
    value, error = _expect_over_w(spec, lambda w, s: mu.mu(w) * h0.dh(w))
    logger.debug("oracle theta0 = %.12g (abs. quadrature error %.2g)", value, error)
    if not error <= QUADRATURE_TOLERANCE:
        raise NumericalError("theta0 quadrature did not converge", error)
    return value


def build_oracle(spec: DgpSpec, mu: Optional[WeightFn] = None) -> Oracle:
    """
    Assemble the oracle of a design.

    Raises:
        OracleError: b = 0 makes W a function of X, so p_{W|X} does not exist
    """
    spec.validate()
    if spec.b == 0.0:
        raise OracleError("mixing b = 0 leaves W|X degenerate; oracle densities need b != 0")
    mu = mu or WeightFn.default()
    return Oracle(spec=spec, weight=mu, theta0=oracle_theta0(spec, mu))


def theta0_by_parts(oracle: Oracle) -> float:
    """theta0 = -int l(w) h0(w) dw, evaluated as -E[(l / p_W)(W) h0(W)]."""
    weight = oracle.weight

    def integrand(w: np.ndarray, s: np.ndarray) -> np.ndarray:
        ratio = weight.dmu(w) + weight.mu(w) * oracle.dlog_pdf_w_from_s(s)
        return ratio * oracle.h0.h(w)

    value, error = _expect_over_w(oracle.spec, integrand)
    if not error <= QUADRATURE_TOLERANCE:
        raise NumericalError("integration-by-parts quadrature did not converge", error)
    return -value


class DgpService:
    """Simulation design: draws and closed-form quantities."""

    simulate = staticmethod(simulate)
    build_oracle = staticmethod(build_oracle)

    @staticmethod
    def theta0(spec: DgpSpec, mu: Optional[WeightFn] = None) -> float:
        """True theta0; needs only the law of W, so b = 0 designs are fine."""
        return oracle_theta0(spec, mu)
