"""Efficiency bound on a discretized operator, and ill-posedness diagnostics.

The operator T: L2(P_W) -> L2(P_X),

    T[g](x) = int p_{Y|WX}(h0(w) | w, x) g(w) p_{W|X}(w | x) dw,

is represented on Gauss-Legendre nodes. W-nodes sit at Gauss-Legendre points
of the quantile scale u = Phi(S / sigma_s), so the L2(P_W) weights are the
Gauss-Legendre weights themselves and sum to 1 exactly. In the weighted
coordinates A = Dx^(1/2) T Dw^(-1/2) the adjoint is A' and the Moore-Penrose
inverse comes from a truncated SVD of A.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy import linalg, optimize, special

from psgel.domain.errors import OracleError
from psgel.domain.models import BoundResult, CurvatureReport, FitConfig, ParamPoint
from psgel.services.dgp_service import Oracle
from psgel.services.moment_service import (
    Bases,
    PopulationDesign,
    population_bases,
    population_g,
    population_h_truth,
    population_jacobian,
)
from psgel.services.sieve_service import project_truth, strong_norm_matrix
from psgel.utils.numerics import central_difference, gauss_hermite_normal, gauss_legendre

logger = logging.getLogger(__name__)

DEFAULT_THRESHOLD = 1e-8
SEARCH_TOLERANCE = 1e-8


@dataclass(frozen=True)
class OperatorGrid:
    """T on quadrature nodes, with the marginal weights of its two L2 spaces."""

    w_nodes: np.ndarray
    x_nodes: np.ndarray
    pw_weights: np.ndarray
    px_weights: np.ndarray
    t_matrix: np.ndarray = field(repr=False)
    pdf_w: np.ndarray = field(repr=False)

    @property
    def weighted(self) -> np.ndarray:
        """A = Dx^(1/2) T Dw^(-1/2); orthonormal coordinates on both sides."""
        return np.sqrt(self.px_weights)[:, None] * self.t_matrix / np.sqrt(self.pw_weights)[None, :]

    def apply(self, g: np.ndarray) -> np.ndarray:
        """T[g] at the x-nodes for g given at the w-nodes."""
        return self.t_matrix @ g

    def adjoint(self, f: np.ndarray) -> np.ndarray:
        """T*[f] at the w-nodes for f given at the x-nodes."""
        return self.t_matrix.T @ (self.px_weights * f) / self.pw_weights

    def inner_x(self, a: np.ndarray, b: np.ndarray) -> float:
        return float(np.sum(self.px_weights * a * b))

    def inner_w(self, a: np.ndarray, b: np.ndarray) -> float:
        return float(np.sum(self.pw_weights * a * b))


def build_operator(oracle: Oracle, nw: int = 64, nx: int = 64) -> OperatorGrid:
    """
    Assemble T from the oracle densities.

    Raises:
        OracleError: a density evaluates to a non-finite or negative value
    """
    u, pw = gauss_legendre(nw)
    s = oracle.sigma_s * special.ndtri(u)
    w = special.ndtr(s)
    x, px = gauss_legendre(nx)

    pdf_w = oracle.pdf_w(w)
    # dw = (du / p_W) with u uniform on (0, 1)
    dw = pw / pdf_w
    ww, xx = np.meshgrid(w, x)
    vv = oracle.latent_v(ww, xx)
    density_y = oracle.cond_pdf_y_latent(oracle.h0.h(ww), ww, vv)
    density_w = oracle.cond_pdf_w_given_x(ww, xx)
    t_matrix = density_y * density_w * dw[None, :]

    if not (np.all(np.isfinite(t_matrix)) and np.all(t_matrix >= 0.0)):
        raise OracleError("operator densities are not finite and nonnegative on the grid")
    logger.debug("operator grid %dx%d, |T|_max = %.4g", nx, nw, float(np.max(t_matrix)))
    return OperatorGrid(
        w_nodes=w, x_nodes=x, pw_weights=pw, px_weights=px, t_matrix=t_matrix, pdf_w=pdf_w
    )


def gamma_on_x(op: OperatorGrid, oracle: Oracle, tau: float, nv: int = 64) -> np.ndarray:
    """Gamma(x) = E[rho1(alpha0) rho2(h0) | X = x] / (tau (1 - tau)) at the x-nodes."""
    v_nodes, v_weights = gauss_hermite_normal(nv)
    spec = oracle.spec
    latent = spec.a * special.ndtri(op.x_nodes)[:, None] + spec.b * v_nodes[None, :]
    w = special.ndtr(latent)
    rho1 = oracle.theta0 - oracle.weight.mu(w) * oracle.h0.dh(w)
    cond = special.ndtr((oracle.z_tau - spec.rho_e * v_nodes[None, :]) / math.sqrt(1.0 - spec.rho_e**2))
    return (rho1 * (cond - tau)) @ v_weights / (tau * (1.0 - tau))


def _rho1_second_moment(op: OperatorGrid, oracle: Oracle) -> float:
    w = op.w_nodes
    rho1 = oracle.theta0 - oracle.weight.mu(w) * oracle.h0.dh(w)
    return op.inner_w(rho1, rho1)


@dataclass(frozen=True)
class _BoundParts:
    spectrum: np.ndarray
    v_right: np.ndarray
    u_left: np.ndarray
    r_hat: np.ndarray
    r_weighted: np.ndarray
    eps_norm_sq: float
    scale: float


def _bound_parts(op: OperatorGrid, oracle: Oracle, tau: float) -> _BoundParts:
    gamma = gamma_on_x(op, oracle, tau)
    a = op.weighted
    u_left, spectrum, vt = linalg.svd(a, full_matrices=False)
    r = oracle.ell_over_pdf(op.w_nodes)
    r_weighted = np.sqrt(op.pw_weights) * r
    r_hat = r_weighted - a.T @ (np.sqrt(op.px_weights) * gamma)
    scale = tau * (1.0 - tau)
    eps_norm_sq = _rho1_second_moment(op, oracle) - scale * op.inner_x(gamma, gamma)
    return _BoundParts(
        spectrum=spectrum,
        v_right=vt.T,
        u_left=u_left,
        r_hat=r_hat,
        r_weighted=r_weighted,
        eps_norm_sq=eps_norm_sq,
        scale=scale,
    )


def _truncation_index(spectrum: np.ndarray, threshold: float) -> int:
    if spectrum.size == 0 or spectrum[0] == 0.0:
        return 0
    return int(np.sum(spectrum**2 > threshold * spectrum[0] ** 2))


def _result(parts: _BoundParts, kept: int, threshold: float) -> BoundResult:
    coefs = parts.v_right.T @ parts.r_hat
    terms = parts.scale * coefs[:kept] ** 2 / parts.spectrum[:kept] ** 2
    partial = np.cumsum(terms)
    correction_sq = float(partial[-1]) if kept else 0.0

    kept_basis = parts.v_right[:, :kept]
    range_residual = float(np.linalg.norm(parts.r_hat - kept_basis @ (kept_basis.T @ parts.r_hat)))
    kernel_component = float(
        np.linalg.norm(parts.r_weighted - kept_basis @ (kept_basis.T @ parts.r_weighted))
    )

    positive = parts.spectrum[parts.spectrum > 0.0]
    if positive.size >= 2:
        slope = float(np.polyfit(np.log(np.arange(1, positive.size + 1)), np.log(positive), 1)[0])
    else:
        slope = float("nan")

    r_norm = float(np.linalg.norm(parts.r_hat))
    tail = float(np.sum(terms[-max(1, kept // 4):])) if kept else 0.0
    reliable = range_residual <= 1e-3 * (1.0 + r_norm) and (
        correction_sq == 0.0 or tail <= 0.5 * correction_sq
    )
    if not reliable:
        logger.warning(
            "efficiency bound flagged unreliable: range residual %.3g, Picard tail share %.3g",
            range_residual,
            tail / correction_sq if correction_sq else 0.0,
        )
    return BoundResult(
        v0=parts.eps_norm_sq + correction_sq,
        eps_norm_sq=parts.eps_norm_sq,
        correction_sq=correction_sq,
        svd_spectrum=parts.spectrum,
        truncation_index=kept,
        threshold=threshold,
        range_residual=range_residual,
        kernel_component_norm=kernel_component,
        picard_partial_sums=partial,
        decay_slope=slope,
        reliable=reliable,
    )


def v0_bound(
    op: OperatorGrid, oracle: Oracle, tau: float, threshold: float = DEFAULT_THRESHOLD
) -> BoundResult:
    """
    V0 = ||eps||^2 + tau (1 - tau) ||T (T*T)^+ (r - T* Gamma)||^2_{L2(P_X)}.

    Args:
        op: Discretized operator
        oracle: Design oracle providing l / p_W and Gamma
        tau: Quantile level
        threshold: Singular values with s^2 <= threshold * s_max^2 are dropped

    Returns:
        BoundResult with the Picard partial sums and finiteness diagnostics
    """
    parts = _bound_parts(op, oracle, tau)
    return _result(parts, _truncation_index(parts.spectrum, threshold), threshold)


def truncation_sweep(
    op: OperatorGrid, oracle: Oracle, tau: float, ks: Iterable[int]
) -> list[BoundResult]:
    """V0 keeping the first k singular values, for each k."""
    parts = _bound_parts(op, oracle, tau)
    results = []
    for k in ks:
        kept = int(min(max(k, 0), parts.spectrum.size))
        threshold = float((parts.spectrum[kept - 1] / parts.spectrum[0]) ** 2) if kept else 1.0
        results.append(_result(parts, kept, threshold))
    return results


def range_projection(op: OperatorGrid, threshold: float = DEFAULT_THRESHOLD) -> np.ndarray:
    """P = T (T*T)^+ T* in orthonormal L2(P_X) coordinates."""
    u_left, spectrum, _ = linalg.svd(op.weighted, full_matrices=False)
    kept = _truncation_index(spectrum, threshold)
    basis = u_left[:, :kept]
    return basis @ basis.T


def eps_orthogonality(op: OperatorGrid, oracle: Oracle, tau: float, f: np.ndarray, nv: int = 64) -> float:
    """E[eps(Z) rho2(Y, W, h0) f(X)] for f given at the x-nodes."""
    v_nodes, v_weights = gauss_hermite_normal(nv)
    spec = oracle.spec
    w = special.ndtr(spec.a * special.ndtri(op.x_nodes)[:, None] + spec.b * v_nodes[None, :])
    rho1 = oracle.theta0 - oracle.weight.mu(w) * oracle.h0.dh(w)
    cond = special.ndtr((oracle.z_tau - spec.rho_e * v_nodes[None, :]) / math.sqrt(1.0 - spec.rho_e**2))
    cross = (rho1 * (cond - tau)) @ v_weights
    gamma = gamma_on_x(op, oracle, tau, nv)
    # E[rho2^2 | X] = tau (1 - tau)
    return op.inner_x(f, cross) - tau * (1.0 - tau) * op.inner_x(f, gamma)


class PopulationCriterion:
    """Optimally weighted population GMM criterion Q_J(alpha, P) and its penalized form."""

    def __init__(
        self,
        oracle: Oracle,
        config: FitConfig,
        bases: Optional[Bases] = None,
        design: Optional[PopulationDesign] = None,
    ):
        self.oracle = oracle
        self.config = config
        self.tau = config.tau
        self.bases = bases or population_bases(config.sieve, oracle.weight)
        self.design = design or PopulationDesign.build(oracle, self.bases)
        self.flags: dict[str, bool] = {}

        weight = population_h_truth(oracle, self.bases, self.tau, self.design)
        trace = float(np.trace(weight))
        self.ridge = 0.0
        if float(np.linalg.eigvalsh(weight)[0]) <= 1e-12 * trace:
            self.ridge = 1e-10 * trace
            weight = weight + self.ridge * np.eye(len(weight))
            self.flags["weight_ridged"] = True
            logger.warning("population H_J(alpha0) is singular; ridged by %.3g", self.ridge)
        self.weight = weight
        self._factor = linalg.cho_factor(weight, lower=True)
        d = np.zeros((self.bases.k + 1, self.bases.k + 1))
        d[1:, 1:] = self.bases.penalty
        self._penalty = d

    def moment(self, alpha: ParamPoint) -> np.ndarray:
        return population_g(alpha, self.oracle, self.bases, self.tau, self.design)

    def jacobian(self, alpha: ParamPoint) -> np.ndarray:
        return population_jacobian(alpha, self.oracle, self.bases, self.tau, self.design)

    def value(self, alpha: ParamPoint) -> float:
        """Q_J(alpha, P) = g' H_J(alpha0, P)^-1 g."""
        g = self.moment(alpha)
        return float(g @ linalg.cho_solve(self._factor, g))

    def gradient(self, alpha: ParamPoint) -> np.ndarray:
        g = self.moment(alpha)
        return 2.0 * self.jacobian(alpha).T @ linalg.cho_solve(self._factor, g)

    def penalized(self, alpha: ParamPoint) -> float:
        """Q_J + gamma_K Pen."""
        return self.value(alpha) + self.bases.gamma_k * float(alpha.pi @ self.bases.penalty @ alpha.pi)

    def penalized_gradient(self, alpha: ParamPoint) -> np.ndarray:
        return self.gradient(alpha) + 2.0 * self.bases.gamma_k * self._penalty @ alpha.vector

    def _gauss_newton(self, x: np.ndarray, bounds: Sequence[tuple], steps: int = 20) -> np.ndarray:
        lo, hi = bounds[0]
        fx = self.penalized(ParamPoint.from_vector(x))
        for _ in range(steps):
            alpha = ParamPoint.from_vector(x)
            jac = self.jacobian(alpha)
            g = self.moment(alpha)
            weighted_jac = linalg.cho_solve(self._factor, jac)
            normal = jac.T @ weighted_jac + self.bases.gamma_k * self._penalty
            rhs = -(weighted_jac.T @ g + self.bases.gamma_k * self._penalty @ x)
            try:
                delta = linalg.solve(normal, rhs, assume_a="sym")
            except linalg.LinAlgError:
                break
            step = 1.0
            for _ in range(30):
                candidate = x + step * delta
                candidate[0] = min(max(candidate[0], lo), hi)
                fc = self.penalized(ParamPoint.from_vector(candidate))
                if fc <= fx:
                    break
                step *= 0.5
            else:
                break
            improvement = fx - fc
            x, fx = candidate, fc
            if improvement <= 1e-18 * max(1.0, fx):
                break
        return x

    def projected_gradient_norm(self, alpha: ParamPoint, theta_box: tuple[float, float]) -> float:
        grad = self.penalized_gradient(alpha)
        lo, hi = theta_box
        if (alpha.theta <= lo and grad[0] > 0.0) or (alpha.theta >= hi and grad[0] < 0.0):
            grad[0] = 0.0
        return float(np.linalg.norm(grad))

    def minimize(self, starts: Sequence[ParamPoint], theta_box: tuple[float, float]) -> tuple[ParamPoint, dict]:
        """
        Minimize the penalized criterion from each start; quasi-Newton then Gauss-Newton.

        Returns:
            Best point and a diagnostics dict with per-start values
        """
        bounds = [theta_box] + [(None, None)] * self.bases.k
        outcomes = []
        for start in starts:
            x0 = start.vector.copy()
            x0[0] = min(max(x0[0], theta_box[0]), theta_box[1])
            res = optimize.minimize(
                lambda v: self.penalized(ParamPoint.from_vector(v)),
                x0,
                jac=lambda v: self.penalized_gradient(ParamPoint.from_vector(v)),
                method="L-BFGS-B",
                bounds=bounds,
                options={"maxiter": 2000, "ftol": 1e-15, "gtol": 1e-12},
            )
            x = self._gauss_newton(np.asarray(res.x, dtype=float), bounds)
            alpha = ParamPoint.from_vector(x)
            outcomes.append((self.penalized(alpha), alpha, bool(res.success)))
        outcomes.sort(key=lambda o: o[0])
        best_value, best, _ = outcomes[0]
        info = {
            "values": [o[0] for o in outcomes],
            "converged": [o[2] for o in outcomes],
            "projectedGradient": self.projected_gradient_norm(best, theta_box),
        }
        return best, info


def q_j_criterion(alpha: ParamPoint, oracle: Oracle, config: FitConfig, bases: Optional[Bases] = None) -> float:
    """Q_J(alpha, P) with the population-whitened instrument basis by default."""
    return PopulationCriterion(oracle, config, bases).value(alpha)


def truth_projection(oracle: Oracle, bases: Bases) -> ParamPoint:
    """Pi_K alpha0 = (theta0, L2(Leb) projection of h0)."""
    return ParamPoint(theta=oracle.theta0, pi=project_truth(bases.h, oracle.h0.h))


def _sphere_point(center: np.ndarray, factor: np.ndarray, u: np.ndarray, radius: float) -> np.ndarray:
    return center + radius * linalg.solve_triangular(factor, u / np.linalg.norm(u), lower=True, trans="T")


def _shell_minimum(
    criterion: PopulationCriterion,
    center: ParamPoint,
    radius: float,
    rng: np.random.Generator,
    n_starts: int,
) -> float:
    """min of the penalized criterion on {||alpha - center|| = radius}, multistart BFGS over directions."""
    factor = linalg.cholesky(strong_norm_matrix(criterion.bases.h), lower=True)
    base = criterion.penalized(center)
    dim = center.vector.size

    def fun(u: np.ndarray) -> float:
        return criterion.penalized(ParamPoint.from_vector(_sphere_point(center.vector, factor, u, radius))) - base

    def jac(u: np.ndarray) -> np.ndarray:
        norm = np.linalg.norm(u)
        unit = u / norm
        point = ParamPoint.from_vector(_sphere_point(center.vector, factor, u, radius))
        grad = criterion.penalized_gradient(point)
        pulled = radius * linalg.solve_triangular(factor, grad, lower=True)
        return (pulled - unit * (unit @ pulled)) / norm

    starts = list(np.eye(dim)) + list(-np.eye(dim)) + [rng.standard_normal(dim) for _ in range(n_starts)]
    best = math.inf
    for u0 in starts:
        res = optimize.minimize(fun, u0, jac=jac, method="BFGS", options={"gtol": 1e-12, "maxiter": 500})
        best = min(best, float(res.fun))
    return best


def varpi_profile(
    oracle: Oracle,
    config: FitConfig,
    t_grid: Sequence[float],
    alpha_l0: Optional[ParamPoint] = None,
    criterion: Optional[PopulationCriterion] = None,
    n_starts: int = 8,
) -> CurvatureReport:
    """
    Grid profile of the exterior infimum of the penalized criterion, and e_min(I_L).

    The infimum over {||alpha - alpha_L0|| >= t} is approximated by the minimum over
    the shells at t_j >= t on the grid; this boundary restriction is a heuristic
    and is flagged in the report.
    """
    criterion = criterion or PopulationCriterion(oracle, config)
    theta_box = (config.theta_lo, config.theta_hi)
    if alpha_l0 is None:
        starts = [truth_projection(oracle, criterion.bases), ParamPoint(theta=0.0, pi=np.zeros(criterion.bases.k))]
        alpha_l0, _ = criterion.minimize(starts, theta_box)

    rng = np.random.default_rng(config.seed)
    grid = sorted(float(t) for t in t_grid)
    shell = [0.0 if t == 0.0 else _shell_minimum(criterion, alpha_l0, t, rng, n_starts) for t in grid]
    running = np.minimum.accumulate(np.asarray(shell)[::-1])[::-1] if shell else np.zeros(0)

    flags = {"boundary_heuristic": True}
    if np.any(running < -SEARCH_TOLERANCE):
        flags["search_below_center"] = True
        logger.warning("shell search found values below the pseudo-true criterion")
    if np.any(running < 0.0):
        flags["negative_clipped"] = True
    varpi = np.maximum(running, 0.0)

    info = information_matrix(criterion, alpha_l0)
    probes = [alpha_l0, truth_projection(oracle, criterion.bases), ParamPoint(0.0, np.zeros(criterion.bases.k))]
    return CurvatureReport(
        q_j_values=[criterion.value(p) for p in probes],
        varpi_samples=list(zip(grid, varpi.tolist())),
        i_l_min_eig=float(np.linalg.eigvalsh(info)[0]),
        boundary_minima=shell,
        flags=flags,
    )


def information_matrix(criterion: PopulationCriterion, alpha: ParamPoint, step: float = 1e-5) -> np.ndarray:
    """Half the Hessian of the penalized criterion at alpha, by central differences of the gradient."""
    hess = central_difference(
        lambda v: criterion.penalized_gradient(ParamPoint.from_vector(v)), alpha.vector, step
    )
    return 0.25 * (hess + hess.T)


class BoundService:
    """Efficiency bound and ill-posedness diagnostics of the design."""

    build_operator = staticmethod(build_operator)
    v0_bound = staticmethod(v0_bound)
    truncation_sweep = staticmethod(truncation_sweep)
    varpi_profile = staticmethod(varpi_profile)
    information_matrix = staticmethod(information_matrix)

