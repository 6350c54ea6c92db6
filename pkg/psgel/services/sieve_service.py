"""Sieve bases for h, instrument bases for X, and the Sobolev penalty."""

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from numpy.polynomial import legendre as npleg
from scipy import linalg
from scipy.interpolate import BSpline

from psgel.domain.enums import BasisKind, PenaltyKind
from psgel.domain.errors import ConfigurationError, DegenerateBasisError
from psgel.domain.models import Dataset, ParamPoint, SieveSpec
from psgel.utils.numerics import composite_gauss_legendre

logger = logging.getLogger(__name__)

GRAM_TOLERANCE = 1e-10
MAX_GRAM_ORDER = 1024
# sup_w |mu(w) h'(w)| <= C max(mu) (1 + Pen) for the sobolev12 penalty:
# |h'(w)| <= ||h'||_2 + ||h''||_2 <= sqrt(2 Pen) <= 1 + Pen
SOBOLEV_SUP_CONSTANT = 1.0

Evaluator = Callable[[np.ndarray], np.ndarray]


def _uniform_clamped_knots(n_functions: int, degree: int) -> np.ndarray:
    n_interior = n_functions - degree - 1
    if n_interior < 0:
        raise ConfigurationError(
            f"a degree-{degree} B-spline basis needs at least {degree + 1} functions, got {n_functions}"
        )
    interior = np.linspace(0.0, 1.0, n_interior + 2)[1:-1]
    return np.concatenate((np.zeros(degree + 1), interior, np.ones(degree + 1)))


def _validate_knots(knots: np.ndarray, degree: int) -> None:
    if np.any(np.diff(knots) < 0):
        raise ConfigurationError("knot vector must be non-decreasing")
    if knots[0] != 0.0 or knots[-1] != 1.0:
        raise ConfigurationError("knot vector must span [0, 1]")
    _, counts = np.unique(knots, return_counts=True)
    if np.any(counts[1:-1] > degree + 1):
        raise ConfigurationError("interior knot multiplicity exceeds degree + 1")


def _raw_evaluators(
    kind: BasisKind, n_functions: int, degree: int, knots: Optional[np.ndarray] = None
) -> tuple[list[Evaluator], np.ndarray]:
    """[f, f', f''] as (n,) -> (n, n_functions) maps, plus integration breakpoints."""
    kind = BasisKind(kind)
    if kind is BasisKind.LEGENDRE:
        # sqrt(2k+1) P_k(2w - 1): orthonormal in L2([0, 1])
        coefs = [np.sqrt(2 * k + 1) * np.eye(n_functions)[k] for k in range(n_functions)]
        polys = [npleg.Legendre(c, domain=[0.0, 1.0]) for c in coefs]

        def make(order: int) -> Evaluator:
            derived = [p.deriv(order) if order else p for p in polys]
            return lambda w: np.column_stack([p(np.asarray(w, dtype=float)) for p in derived])

        return [make(0), make(1), make(2)], np.array([0.0, 1.0])

    if kind is BasisKind.COSINE:
        freq = np.pi * np.arange(n_functions)

        def f0(w):
            return np.cos(np.outer(np.asarray(w, dtype=float), freq))

        def f1(w):
            return -freq * np.sin(np.outer(np.asarray(w, dtype=float), freq))

        def f2(w):
            return -(freq**2) * np.cos(np.outer(np.asarray(w, dtype=float), freq))

        return [f0, f1, f2], np.array([0.0, 1.0])

    knots = _uniform_clamped_knots(n_functions, degree) if knots is None else np.asarray(knots, float)
    _validate_knots(knots, degree)
    if len(knots) - degree - 1 != n_functions:
        raise ConfigurationError(
            f"knot vector of length {len(knots)} gives {len(knots) - degree - 1} "
            f"degree-{degree} functions, expected {n_functions}"
        )
    spline = BSpline(knots, np.eye(n_functions), degree, extrapolate=True)
    derived = [spline] + [
        spline.derivative(order) if order <= degree else None for order in (1, 2)
    ]

    def make_spline(s: Optional[BSpline]) -> Evaluator:
        if s is None:
            return lambda w: np.zeros((len(np.atleast_1d(w)), n_functions))
        return lambda w: s(np.clip(np.atleast_1d(np.asarray(w, dtype=float)), 0.0, 1.0))

    return [make_spline(s) for s in derived], np.unique(knots)


def _gram(func_a: Evaluator, func_b: Evaluator, breakpoints: np.ndarray, start: int) -> np.ndarray:
    """int_0^1 a(w) b(w)' dw; composite Gauss-Legendre, doubled until stable to 1e-10."""
    order = start
    previous = None
    while True:
        nodes, weights = composite_gauss_legendre(breakpoints, order)
        gram = (func_a(nodes) * weights[:, None]).T @ func_b(nodes)
        gram = 0.5 * (gram + gram.T) if func_a is func_b else gram
        if previous is not None and np.max(np.abs(gram - previous)) < GRAM_TOLERANCE:
            return gram
        if order >= MAX_GRAM_ORDER:
            logger.warning("Gram quadrature stopped at order %d", order)
            return gram
        previous = gram
        order *= 2


@dataclass(frozen=True)
class HBasis:
    """Sieve basis phi^K for h with analytic first and second derivatives."""

    kind: BasisKind
    k: int
    evaluators: tuple[Evaluator, Evaluator, Evaluator] = field(repr=False)
    gram: np.ndarray = field(repr=False)
    gram_d1: np.ndarray = field(repr=False)
    gram_d2: np.ndarray = field(repr=False)
    breakpoints: np.ndarray = field(repr=False)
    degree: int = 3
    knots: Optional[np.ndarray] = field(default=None, repr=False)

    def __reduce__(self):
        # evaluators are closures and do not pickle
        return (
            _restore_h_basis,
            (self.kind, self.k, self.degree, self.knots, self.gram, self.gram_d1, self.gram_d2, self.breakpoints),
        )

    def eval(self, w: np.ndarray) -> np.ndarray:
        """(n, K) matrix of phi_k(w)."""
        return self.evaluators[0](w)

    def deriv(self, w: np.ndarray) -> np.ndarray:
        """(n, K) matrix of phi_k'(w)."""
        return self.evaluators[1](w)

    def deriv2(self, w: np.ndarray) -> np.ndarray:
        """(n, K) matrix of phi_k''(w)."""
        return self.evaluators[2](w)

    def h(self, alpha: ParamPoint, w: np.ndarray) -> np.ndarray:
        return self.eval(w) @ alpha.pi

    def dh(self, alpha: ParamPoint, w: np.ndarray) -> np.ndarray:
        return self.deriv(w) @ alpha.pi


def _restore_h_basis(kind, k, degree, knots, gram, gram_d1, gram_d2, breakpoints) -> HBasis:
    evaluators, _ = _raw_evaluators(kind, k, degree, knots)
    return HBasis(
        kind=kind,
        k=k,
        evaluators=tuple(evaluators),
        gram=gram,
        gram_d1=gram_d1,
        gram_d2=gram_d2,
        breakpoints=breakpoints,
        degree=degree,
        knots=knots,
    )


def build_h_basis(spec: SieveSpec, knots: Optional[np.ndarray] = None) -> HBasis:
    """
    Build phi^K with Gram matrices of the function and its derivatives.

    Raises:
        ConfigurationError: invalid knot vector or order
    """
    spec.validate()
    evaluators, breakpoints = _raw_evaluators(spec.h_basis, spec.k, spec.degree, knots)
    start = max(2 * spec.k + 4, 16) if spec.h_basis is not BasisKind.BSPLINE else spec.degree + 1
    f0, f1, f2 = evaluators
    return HBasis(
        kind=spec.h_basis,
        k=spec.k,
        evaluators=tuple(evaluators),
        gram=_gram(f0, f0, breakpoints, start),
        gram_d1=_gram(f1, f1, breakpoints, start),
        gram_d2=_gram(f2, f2, breakpoints, start),
        breakpoints=breakpoints,
        degree=spec.degree,
        knots=None if knots is None else np.asarray(knots, dtype=float),
    )


@dataclass(frozen=True)
class QBasis:
    """Instrument basis q^J whitened so its Gram on the fitting sample is I."""

    kind: BasisKind
    j: int
    raw: Evaluator = field(repr=False)
    whitener: np.ndarray = field(repr=False)
    degree: int = 3
    scale: float = 1.0

    def __reduce__(self):
        return (_restore_q_basis, (self.kind, self.j, self.whitener, self.degree, self.scale))

    def raw_eval(self, x: np.ndarray) -> np.ndarray:
        """(n, J) matrix of the raw basis."""
        return self.raw(x)

    def eval(self, x: np.ndarray) -> np.ndarray:
        """(n, J) matrix of whitened q^J(x)."""
        return self.raw(x) @ self.whitener.T


def _instrument_raw(kind: BasisKind, j: int, degree: int, scale: float = 1.0) -> Evaluator:
    kind = BasisKind(kind)
    if kind is BasisKind.COSINE:
        freq = np.pi * np.arange(j)
        norm = scale * np.where(freq == 0.0, 1.0, math.sqrt(2.0))
        return lambda x: norm * np.cos(np.outer(np.asarray(x, dtype=float), freq))
    evaluators, _ = _raw_evaluators(kind, j, degree if kind is BasisKind.BSPLINE else 0)
    if scale == 1.0:
        return evaluators[0]
    return lambda x: scale * evaluators[0](x)


def _restore_q_basis(kind, j, whitener, degree, scale) -> QBasis:
    raw = _instrument_raw(kind, j, degree, scale)
    return QBasis(kind=kind, j=j, raw=raw, whitener=whitener, degree=degree, scale=scale)


def whiten(gram: np.ndarray, j_order: int) -> np.ndarray:
    """
    Inverse Cholesky factor of a Gram matrix.

    Raises:
        DegenerateBasisError: min eigenvalue <= 1e-10 * trace / J
    """
    gram = 0.5 * (gram + gram.T)
    min_eig = float(np.linalg.eigvalsh(gram)[0])
    if min_eig <= 1e-10 * np.trace(gram) / j_order:
        raise DegenerateBasisError(min_eig, j_order)
    factor = linalg.cholesky(gram, lower=True)
    return linalg.solve_triangular(factor, np.eye(len(gram)), lower=True)


def build_q_basis(spec: SieveSpec, data: Dataset, scale: float = 1.0) -> QBasis:
    """
    Instrument basis whitened on the empirical Gram (1/n) sum q(X_i) q(X_i)'.

    ``scale`` multiplies every raw function before whitening; the whitened basis does not
    depend on it.
    """
    spec.validate()
    if scale == 0.0 or not math.isfinite(scale):
        raise ConfigurationError(f"instrument scale must be finite and nonzero, got {scale}")
    raw = _instrument_raw(spec.q_basis, spec.j, spec.degree, scale)
    values = raw(data.x)
    gram = values.T @ values / data.n
    return QBasis(
        kind=spec.q_basis, j=spec.j, raw=raw, whitener=whiten(gram, spec.j), degree=spec.degree, scale=scale
    )


def population_q_basis(spec: SieveSpec, order: int = 256) -> QBasis:
    """Instrument basis whitened under X ~ U(0, 1), the simulation law."""
    spec.validate()
    raw = _instrument_raw(spec.q_basis, spec.j, spec.degree)
    breakpoints = [0.0, 1.0]
    if spec.q_basis is BasisKind.BSPLINE:
        breakpoints = np.unique(_uniform_clamped_knots(spec.j, spec.degree))
    nodes, weights = composite_gauss_legendre(breakpoints, order)
    values = raw(nodes)
    gram = (values * weights[:, None]).T @ values
    return QBasis(kind=spec.q_basis, j=spec.j, raw=raw, whitener=whiten(gram, spec.j), degree=spec.degree)


def penalty_matrix(spec: SieveSpec, hb: HBasis) -> np.ndarray:
    """D with Pen(alpha) = pi' D pi."""
    if PenaltyKind(spec.penalty) is PenaltyKind.SOBOLEV1:
        return hb.gram_d1.copy()
    return hb.gram_d1 + hb.gram_d2


def penalty_value(d: np.ndarray, alpha: ParamPoint) -> float:
    """Pen(alpha) = pi' D pi; theta does not enter."""
    return float(alpha.pi @ d @ alpha.pi)


def project_truth(hb: HBasis, h: Evaluator, order: int = 128) -> np.ndarray:
    """Coefficients of the L2([0, 1]) projection of h onto span(phi^K)."""
    nodes, weights = composite_gauss_legendre(hb.breakpoints, order)
    rhs = (hb.eval(nodes) * weights[:, None]).T @ h(nodes)
    return linalg.solve(hb.gram, rhs, assume_a="pos")


def sup_weighted_derivative(hb: HBasis, alpha: ParamPoint, mu: Evaluator, grid_size: int = 512) -> float:
    """sup over a uniform grid of |mu(w) h'(w)|."""
    grid = np.linspace(0.0, 1.0, grid_size)
    return float(np.max(np.abs(mu(grid) * hb.dh(alpha, grid))))


def sobolev_control(
    hb: HBasis, d: np.ndarray, alpha: ParamPoint, mu: Evaluator, grid_size: int = 512
) -> tuple[float, float]:
    """
    sup |mu h'| on a grid and its Sobolev bound C max(mu) (1 + Pen(alpha)).

    The bound holds for the sobolev12 penalty on [0, 1].
    """
    grid = np.linspace(0.0, 1.0, grid_size)
    bound = SOBOLEV_SUP_CONSTANT * float(np.max(mu(grid))) * (1.0 + penalty_value(d, alpha))
    return sup_weighted_derivative(hb, alpha, mu, grid_size), bound


def strong_norm_matrix(hb: HBasis) -> np.ndarray:
    """(K+1)x(K+1) Gram of ||(theta, h)||^2 = theta^2 + int h^2 dw."""
    out = np.zeros((hb.k + 1, hb.k + 1))
    out[0, 0] = 1.0
    out[1:, 1:] = hb.gram
    return out

