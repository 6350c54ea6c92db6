"""GEL carrier families and the inner maximization over the multiplier."""

import logging
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy import linalg

from psgel.domain.enums import GelKind
from psgel.domain.errors import InnerSolverError, OutOfDomainError
from psgel.domain.models import Dataset, InnerSolution, ParamPoint
from psgel.services.moment_service import Bases, MomentDesign, g_matrix
from psgel.utils.numerics import tree_mean

logger = logging.getLogger(__name__)

BOUNDARY_FRACTION = 0.99
MAX_BACKTRACKS = 60
RIDGE_SCALE = 1e-10

Carrier = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True)
class GelFamily:
    """Concave carrier s with s(0) = 0, s'(0) = s''(0) = -1, on (-inf, upper)."""

    kind: GelKind
    s: Carrier
    s1: Carrier
    s2: Carrier
    upper: float = math.inf

    def in_domain(self, v: np.ndarray) -> np.ndarray:
        return np.asarray(v) < self.upper


def _el(v):
    return np.log1p(-v)


def _el1(v):
    return -1.0 / (1.0 - v)


def _el2(v):
    return -1.0 / (1.0 - v) ** 2


def _et(v):
    return -np.expm1(v)


def _et1(v):
    return -np.exp(v)


def _cue(v):
    return -v - 0.5 * v**2


def _cue1(v):
    return -1.0 - v


def _cue2(v):
    return -np.ones_like(v)


_FAMILIES = {
    GelKind.EL: GelFamily(kind=GelKind.EL, s=_el, s1=_el1, s2=_el2, upper=1.0),
    GelKind.ET: GelFamily(kind=GelKind.ET, s=_et, s1=_et1, s2=_et1),
    GelKind.CUE: GelFamily(kind=GelKind.CUE, s=_cue, s1=_cue1, s2=_cue2),
}


def s_family(kind: GelKind) -> GelFamily:
    """Shipped carrier: EL log(1 - v), ET 1 - exp(v), CUE -v - v^2 / 2."""
    return _FAMILIES[GelKind(kind)]


def objective(g: np.ndarray, lam: np.ndarray, family: GelFamily) -> float:
    """
    (1/n) sum_i s(lambda' g_i) - s(0).

    Raises:
        OutOfDomainError: some lambda' g_i lies outside the carrier domain
    """
    v = g @ lam
    outside = np.flatnonzero(~family.in_domain(v))
    if outside.size:
        index = int(outside[0])
        raise OutOfDomainError(index, float(v[index]))
    return float(tree_mean(family.s(v)))


def inner_gradient(g: np.ndarray, lam: np.ndarray, family: GelFamily) -> np.ndarray:
    return tree_mean(family.s1(g @ lam)[:, None] * g)


def inner_hessian(g: np.ndarray, lam: np.ndarray, family: GelFamily) -> np.ndarray:
    """(1/n) sum_i s''(lambda' g_i) g_i g_i'; negative semidefinite."""
    weights = family.s2(g @ lam)
    hess = (g * weights[:, None]).T @ g / len(g)
    return 0.5 * (hess + hess.T)


def _newton_direction(hess: np.ndarray, grad: np.ndarray) -> tuple[np.ndarray, float]:
    """Solve (-hess) d = grad, ridging once if -hess is numerically singular."""
    neg = -hess
    try:
        factor = linalg.cho_factor(neg, lower=True, check_finite=True)
        if np.min(np.abs(np.diag(factor[0]))) ** 2 > RIDGE_SCALE * max(np.trace(neg), 1e-300):
            return linalg.cho_solve(factor, grad), 0.0
    except (linalg.LinAlgError, ValueError):
        pass
    ridge = RIDGE_SCALE * max(float(np.trace(neg)), 1.0)
    try:
        factor = linalg.cho_factor(neg + ridge * np.eye(len(neg)), lower=True)
    except linalg.LinAlgError as e:
        raise InnerSolverError(f"inner Hessian stays singular after ridge {ridge:.3g}") from e
    logger.debug("inner Hessian ridged by %.3g", ridge)
    return linalg.cho_solve(factor, grad), ridge


def _max_step(v: np.ndarray, dv: np.ndarray, upper: float) -> float:
    """Largest step keeping v + t dv at least 1% of the current gap inside the domain."""
    if not math.isfinite(upper):
        return 1.0
    moving = dv > 0.0
    if not np.any(moving):
        return 1.0
    gaps = upper - v[moving]
    return float(min(1.0, np.min(BOUNDARY_FRACTION * gaps / dv[moving])))


def maximize_multiplier(
    g: np.ndarray, family: GelFamily, tol: float = 1e-9, max_iter: int = 100
) -> InnerSolution:
    """
    sup_lambda (1/n) sum s(lambda' g_i) by safeguarded Newton from lambda = 0.

    Args:
        g: (n, J+1) moment rows
        family: GEL carrier
        tol: Gradient-norm tolerance
        max_iter: Newton iteration limit

    Returns:
        InnerSolution; value >= 0 because lambda = 0 is feasible and steps only ascend

    Raises:
        InnerSolverError: the Hessian is singular even after ridging, or the objective is not finite
    """
    m = g.shape[1]
    lam = np.zeros(m)
    value = 0.0
    ridge = 0.0
    boundary_active = False
    trace = [value]
    grad = inner_gradient(g, lam, family)
    grad_norm = float(np.linalg.norm(grad))
    iterations = 0

    while grad_norm > tol and iterations < max_iter:
        iterations += 1
        hess = inner_hessian(g, lam, family)
        direction, used_ridge = _newton_direction(hess, grad)
        ridge = max(ridge, used_ridge)

        v = g @ lam
        step = _max_step(v, g @ direction, family.upper)
        boundary_active = step < 1.0

        for _ in range(MAX_BACKTRACKS):
            candidate = lam + step * direction
            try:
                new_value = objective(g, candidate, family)
            except OutOfDomainError:
                step *= 0.5
                continue
            if new_value >= value:
                break
            step *= 0.5
        else:
            logger.debug("inner backtracking exhausted at gradient norm %.3g", grad_norm)
            break

        if not math.isfinite(new_value):
            raise InnerSolverError(f"inner objective is not finite after {iterations} iterations")
        progress = new_value - value
        lam, value = candidate, new_value
        trace.append(value)
        grad = inner_gradient(g, lam, family)
        grad_norm = float(np.linalg.norm(grad))
        if progress <= 1e-16 * max(1.0, abs(value)) and grad_norm > tol:
            break

    converged = grad_norm <= tol
    if not converged:
        logger.debug(
            "inner solve stopped after %d iterations with gradient norm %.3g", iterations, grad_norm
        )
    return InnerSolution(
        lambda_=lam,
        value=max(value, 0.0),
        gradient_norm=grad_norm,
        iterations=iterations,
        boundary_hit=(not converged) and boundary_active,
        converged=converged,
        ridge=ridge,
        trace=trace,
    )


def s_hat(
    data: Dataset,
    alpha: ParamPoint,
    lam: np.ndarray,
    family: GelFamily,
    bases: Bases,
    tau: float,
) -> float:
    """Sample GEL objective at a given multiplier (exact indicator)."""
    g = g_matrix(MomentDesign.from_data(data, bases), alpha, tau)
    return objective(g, np.asarray(lam, dtype=float), family)


def inner_maximize(
    data: Dataset,
    alpha: ParamPoint,
    family: GelFamily,
    bases: Bases,
    tau: float,
    tol: float = 1e-9,
    max_iter: int = 100,
) -> InnerSolution:
    """Profile sup_lambda S_hat(alpha, lambda) at the exact indicator."""
    g = g_matrix(MomentDesign.from_data(data, bases), alpha, tau)
    return maximize_multiplier(g, family, tol, max_iter)
