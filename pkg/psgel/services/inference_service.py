"""QLR testing, confidence sets by test inversion, and the self-normalized route."""

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from typing import Any, Optional, Sequence

import numpy as np
from scipy import linalg

from psgel.domain.enums import Ingredients
from psgel.domain.errors import (
    ConfigurationError,
    OptimizerInconsistencyError,
    RankDeficiencyError,
)
from psgel.domain.models import (
    BoundResult,
    ConfidenceSet,
    Dataset,
    FitConfig,
    FitResult,
    Interval,
    ParamPoint,
    QlrResult,
    RieszData,
)
from psgel.services.bound_service import PopulationCriterion
from psgel.services.dgp_service import Oracle
from psgel.services.estimator_service import (
    pseudo_true,
    psgel_fit,
    psgel_fit_restricted,
    refine_fit,
)
from psgel.services.moment_service import (
    Bases,
    MomentDesign,
    PopulationDesign,
    build_bases,
    g_matrix,
    h_mat,
    population_bases,
    population_h,
    population_jacobian,
)
from psgel.utils.numerics import (
    chi2_critical_value,
    chi2_pvalue,
    gauss_legendre,
    normal_quantile,
    silverman_bandwidth,
    tree_mean,
)

logger = logging.getLogger(__name__)

NEGATIVE_TOLERANCE = 1e-6
BISECTION_WIDTH = 1e-3
KDE_BLOCK_ELEMENTS = 1 << 22


def qlr_statistic(n: int, restricted: float, unrestricted: float) -> float:
    """2 n (restricted - unrestricted); the criteria are sample averages."""
    return 2.0 * n * (restricted - unrestricted)


def qlr(
    data: Dataset,
    config: FitConfig,
    nu: float,
    unrestricted: Optional[FitResult] = None,
    bases: Optional[Bases] = None,
) -> QlrResult:
    """
    QLR test of theta0 = nu with a chi-square(1) p-value.

    If the restricted fit beats the unrestricted one, its point is feasible for the
    unrestricted problem and the unrestricted fit is re-polished from there.

    Raises:
        OptimizerInconsistencyError: the statistic stays below -1e-6 after repair
    """
    bases = bases or build_bases(config.sieve, data)
    unrestricted = unrestricted or psgel_fit(data, config, bases)
    restricted = psgel_fit_restricted(data, config, nu, bases, warm_start=unrestricted.alpha_hat)
    flags: dict[str, bool] = {}

    if restricted.criterion < unrestricted.criterion:
        logger.warning(
            "restricted fit at nu=%.6g beat the unrestricted fit by %.3g; re-polishing",
            nu,
            unrestricted.criterion - restricted.criterion,
        )
        refined = refine_fit(data, config, restricted.alpha_hat, bases)
        if refined.criterion < unrestricted.criterion:
            unrestricted = refined
        flags["unrestricted_refined"] = True

    statistic = qlr_statistic(data.n, restricted.criterion, unrestricted.criterion)
    if statistic < -NEGATIVE_TOLERANCE:
        raise OptimizerInconsistencyError(
            f"QLR statistic {statistic:.3g} at nu={nu} is below tolerance",
            traces={"restricted": restricted.trace, "unrestricted": unrestricted.trace},
        )
    if statistic < 0.0:
        flags["clipped"] = True
        statistic = 0.0
    return QlrResult(
        statistic=statistic,
        nu=float(nu),
        restricted=restricted,
        unrestricted=unrestricted,
        pvalue=chi2_pvalue(statistic),
        flags=flags,
    )


def _restricted_value(args: tuple) -> float:
    data, config, bases, nu, warm = args
    return psgel_fit_restricted(data, config, nu, bases, warm_start=warm).criterion


class _InversionState:
    """Restricted criteria keyed by nu; the unrestricted value is their running minimum."""

    def __init__(self, data: Dataset, config: FitConfig, bases: Bases, unrestricted: FitResult):
        self.data = data
        self.config = config
        self.bases = bases
        self.unrestricted = unrestricted
        self.values: dict[float, float] = {}

    @property
    def floor(self) -> float:
        values = list(self.values.values()) + [self.unrestricted.criterion]
        return min(values)

    def evaluate(self, nus: Sequence[float]) -> None:
        todo = [float(nu) for nu in nus if float(nu) not in self.values]
        if not todo:
            return
        warm = self.unrestricted.alpha_hat
        if self.config.workers > 1 and len(todo) > 1:
            # grid points run in parallel; each restricted fit keeps its multistarts serial
            serial = replace(self.config, workers=1)
            jobs = [(self.data, serial, self.bases, nu, warm) for nu in todo]
            with ProcessPoolExecutor(max_workers=min(self.config.workers, len(todo))) as pool:
                results = list(pool.map(_restricted_value, jobs))
            for nu, value in zip(todo, results):
                self.values[nu] = value
            return
        for nu in todo:
            fit = psgel_fit_restricted(self.data, self.config, nu, self.bases, warm_start=warm)
            self.values[nu] = fit.criterion

    def statistic(self, nu: float) -> float:
        return max(qlr_statistic(self.data.n, self.values[float(nu)], self.floor), 0.0)


def default_grid(config: FitConfig, size: int = 41) -> list[float]:
    return np.linspace(config.theta_lo, config.theta_hi, size).tolist()


def ci_invert(
    data: Dataset,
    config: FitConfig,
    level: float = 0.95,
    grid: Optional[Sequence[float]] = None,
    unrestricted: Optional[FitResult] = None,
    bases: Optional[Bases] = None,
) -> ConfidenceSet:
    """
    {nu : QLR(nu) <= chi-square(1) quantile at ``level``} as a union of intervals.

    Endpoints between an accepted and a rejected grid point are refined by bisection
    to width 1e-3. An empty acceptance region is returned flagged, with the nu of
    the smallest statistic.
    """
    if not 0.0 < level < 1.0:
        raise ConfigurationError(f"level must lie in (0, 1), got {level}")
    bases = bases or build_bases(config.sieve, data)
    unrestricted = unrestricted or psgel_fit(data, config, bases)
    nus = sorted(set(float(v) for v in (grid if grid is not None else default_grid(config))))
    theta_hat = unrestricted.theta_hat
    if theta_hat not in nus:
        nus = sorted(nus + [theta_hat])

    state = _InversionState(data, config, bases, unrestricted)
    # theta_hat is its own restricted point
    state.values[theta_hat] = unrestricted.criterion
    state.evaluate(nus)
    critical = chi2_critical_value(level)

    statistics = [state.statistic(nu) for nu in nus]
    accepted = [s <= critical for s in statistics]
    runs: list[tuple[int, int]] = []
    start = None
    for i, ok in enumerate(accepted):
        if ok and start is None:
            start = i
        if not ok and start is not None:
            runs.append((start, i - 1))
            start = None
    if start is not None:
        runs.append((start, len(nus) - 1))

    def boundary(inside: float, outside: float) -> float:
        while abs(outside - inside) > BISECTION_WIDTH:
            middle = 0.5 * (inside + outside)
            state.evaluate([middle])
            if state.statistic(middle) <= critical:
                inside = middle
            else:
                outside = middle
        return inside

    intervals = []
    for lo_index, hi_index in runs:
        lower, upper = nus[lo_index], nus[hi_index]
        if lo_index > 0:
            lower = boundary(lower, nus[lo_index - 1])
        if hi_index < len(nus) - 1:
            upper = boundary(upper, nus[hi_index + 1])
        intervals.append((lower, upper))

    statistics = [state.statistic(nu) for nu in nus]
    empty = not intervals
    argmin_nu = nus[int(np.argmin(statistics))] if empty else None
    if empty:
        logger.warning("QLR acceptance region is empty at level %.3g", level)
    if state.floor < unrestricted.criterion:
        logger.warning("a restricted fit undercut the unrestricted criterion during inversion")
    return ConfidenceSet(
        intervals=intervals,
        level=level,
        critical_value=critical,
        grid=nus,
        statistics=statistics,
        empty=empty,
        argmin_nu=argmin_nu,
    )


def riesz_from_blocks(
    g_jacobian: np.ndarray, h_l: np.ndarray, ingredients: str = Ingredients.ORACLE.value
) -> RieszData:
    """
    Riesz representer of theta under the weak norm defined by (M, H).

    v* = (M' H^-1 M)^-1 e1, ||v*||_w^2 = e1' (M' H^-1 M)^-1 e1, u* = v* / ||v*||_w.

    Raises:
        RankDeficiencyError: M' H^-1 M is singular
    """
    h_l = 0.5 * (h_l + h_l.T)
    ridge = 0.0
    trace = float(np.trace(h_l))
    if float(np.linalg.eigvalsh(h_l)[0]) <= 1e-12 * max(trace, 1e-300):
        ridge = 1e-10 * max(trace, 1.0)
        h_l = h_l + ridge * np.eye(len(h_l))
        logger.warning("H_L is singular; ridged by %.3g", ridge)

    information = g_jacobian.T @ linalg.solve(h_l, g_jacobian, assume_a="pos")
    information = 0.5 * (information + information.T)
    eigenvalues = np.linalg.eigvalsh(information)
    if eigenvalues[0] <= 1e-12 * max(abs(eigenvalues[-1]), 1e-300):
        raise RankDeficiencyError(
            "M_L' H_L^-1 M_L is singular: the moment Jacobian does not have full column rank "
            f"(eigenvalues {eigenvalues[0]:.3g} .. {eigenvalues[-1]:.3g})"
        )
    e1 = np.zeros(information.shape[0])
    e1[0] = 1.0
    vstar = linalg.solve(information, e1, assume_a="pos")
    norm = math.sqrt(float(vstar[0]))
    return RieszData(
        g_jacobian=g_jacobian,
        h_l=h_l,
        vstar_norm=norm,
        ustar=vstar / norm,
        vstar=vstar,
        ridge=ridge,
        ingredients=ingredients,
    )


def vstar_norm_by_search(riesz: RieszData, n_directions: int = 10_000, seed: int = 0) -> float:
    """sup |theta| / ||a||_w over random directions a, drawn uniformly in whitened coordinates."""
    factor = linalg.cholesky(riesz.information, lower=True)
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((n_directions, factor.shape[0]))
    directions = linalg.solve_triangular(factor, z.T, lower=True, trans="T").T
    return float(np.max(np.abs(directions[:, 0]) / np.linalg.norm(z, axis=1)))


def _kde_ell_row(data: Dataset, bases: Bases, order: int = 128) -> np.ndarray:
    """int l_hat phi_k dw with l_hat = (mu p_hat_W)' and p_hat_W a Gaussian KDE."""
    bandwidth = silverman_bandwidth(data.w)
    nodes, weights = gauss_legendre(order)
    z = (nodes[:, None] - data.w[None, :]) / bandwidth
    kernel = np.exp(-0.5 * z**2) / (math.sqrt(2.0 * math.pi) * bandwidth)
    pdf = kernel.mean(axis=1)
    dpdf = (-z / bandwidth * kernel).mean(axis=1)
    ell = bases.weight.dmu(nodes) * pdf + bases.weight.mu(nodes) * dpdf
    return (bases.h.eval(nodes) * (weights * ell)[:, None]).sum(axis=0)


def conditional_residual_density(residual: np.ndarray, w: np.ndarray, x: np.ndarray) -> np.ndarray:
    """
    Nadaraya-Watson estimate of p_{R|W,X}(0 | W_i, X_i) at every observation.

    Product Gaussian kernel with a Silverman bandwidth per coordinate; the (W, X) kernel
    weights are formed in row blocks of at most KDE_BLOCK_ELEMENTS entries.
    """
    residual, w, x = (np.asarray(v, dtype=float) for v in (residual, w, x))
    n = len(residual)
    b_r, b_w, b_x = (silverman_bandwidth(v) for v in (residual, w, x))
    k_r = np.exp(-0.5 * (residual / b_r) ** 2) / (math.sqrt(2.0 * math.pi) * b_r)
    out = np.empty(n)
    rows = max(1, KDE_BLOCK_ELEMENTS // n)
    for start in range(0, n, rows):
        stop = min(start + rows, n)
        zw = (w[start:stop, None] - w[None, :]) / b_w
        zx = (x[start:stop, None] - x[None, :]) / b_x
        weights = np.exp(-0.5 * (zw**2 + zx**2))
        # the diagonal term keeps every row sum >= 1
        out[start:stop] = (weights @ k_r) / weights.sum(axis=1)
    return out


def _kde_density_block(data: Dataset, alpha: ParamPoint, bases: Bases) -> np.ndarray:
    """mean_i p_hat(h(W_i) | W_i, X_i) q(X_i) phi(W_i)' with a conditional kernel estimate."""
    phi = bases.h.eval(data.w)
    density = conditional_residual_density(data.y - phi @ alpha.pi, data.w, data.x)
    q = bases.q.eval(data.x)
    return tree_mean(density[:, None, None] * q[:, :, None] * phi[:, None, :])


def build_m_l(
    alpha: ParamPoint,
    ingredients: Ingredients,
    bases: Bases,
    tau: float,
    data: Optional[Dataset] = None,
    oracle: Optional[Oracle] = None,
    design: Optional[PopulationDesign] = None,
) -> RieszData:
    """
    Moment Jacobian M_L and H_L at alpha, and the Riesz representer.

    Oracle mode evaluates both by quadrature over the design; plug-in mode uses
    kernel density estimates for l and p_{Y|WX} and H_L = h_mat at alpha.

    Raises:
        ConfigurationError: the ingredients' inputs are missing
        RankDeficiencyError: M' H^-1 M is singular
    """
    ingredients = Ingredients(ingredients)
    if ingredients is Ingredients.ORACLE:
        if oracle is None:
            raise ConfigurationError("oracle ingredients need an oracle")
        design = design or PopulationDesign.build(oracle, bases)
        jacobian = population_jacobian(alpha, oracle, bases, tau, design)
        h_l = population_h(alpha, oracle, bases, tau, design)
    else:
        if data is None:
            raise ConfigurationError("plug-in ingredients need data")
        jacobian = np.zeros((bases.dim, bases.k + 1))
        jacobian[0, 0] = 1.0
        jacobian[0, 1:] = _kde_ell_row(data, bases)
        jacobian[1:, 1:] = _kde_density_block(data, alpha, bases)
        h_l = h_mat(data, alpha, bases, tau)
    return riesz_from_blocks(jacobian, h_l, ingredients.value)


def interval_from_riesz(theta_hat: float, riesz: RieszData, n: int, level: float) -> Interval:
    """theta_hat +- z_{(1+level)/2} ||v*||_w / sqrt(n)."""
    half = normal_quantile(level) * riesz.vstar_norm / math.sqrt(n)
    return Interval(lower=theta_hat - half, upper=theta_hat + half, center=theta_hat, level=level)


def self_normalized_ci(
    data: Dataset,
    config: FitConfig,
    level: float = 0.95,
    ingredients: Ingredients = Ingredients.PLUG_IN,
    fit: Optional[FitResult] = None,
    oracle: Optional[Oracle] = None,
    bases: Optional[Bases] = None,
) -> tuple[Interval, RieszData]:
    """Wald-type interval from the self-normalized limit of theta_hat."""
    if not 0.0 < level < 1.0:
        raise ConfigurationError(f"level must lie in (0, 1), got {level}")
    bases = bases or build_bases(config.sieve, data)
    fit = fit or psgel_fit(data, config, bases)
    riesz = build_m_l(fit.alpha_hat, ingredients, bases, config.tau, data=data, oracle=oracle)
    return interval_from_riesz(fit.theta_hat, riesz, data.n, level), riesz


def alr_terms(
    data: Dataset,
    fit: FitResult,
    alpha_l0: ParamPoint,
    riesz: RieszData,
    bases: Bases,
    tau: float,
) -> dict[str, Any]:
    """
    Both sides of the asymptotic linear representation for one sample.

    LHS = (theta_hat - theta_L0) / ||v*||_w and
    RHS = -(1/n) sum_i (M u*)' H^-1 g_J(Z_i, alpha_L0).
    """
    g = g_matrix(MomentDesign.from_data(data, bases), alpha_l0, tau)
    direction = linalg.solve(riesz.h_l, riesz.g_jacobian @ riesz.ustar, assume_a="pos")
    influence = -(g @ direction)
    lhs = (fit.theta_hat - alpha_l0.theta) / riesz.vstar_norm
    rhs = float(tree_mean(influence))
    sqrt_n = math.sqrt(data.n)
    return {
        "n": data.n,
        "lhs": lhs,
        "rhs": rhs,
        "scaledGap": sqrt_n * (lhs - rhs),
        "scaledRhs": sqrt_n * rhs,
        "scaledLhs": sqrt_n * lhs,
        "influenceMean": rhs,
        "influenceSd": float(np.std(influence, ddof=1)) if data.n > 1 else 0.0,
        "vstarNorm": riesz.vstar_norm,
    }


def alr_check(
    data: Dataset,
    config: FitConfig,
    oracle: Oracle,
    alpha_l0: Optional[ParamPoint] = None,
    criterion: Optional[PopulationCriterion] = None,
) -> dict[str, Any]:
    """
    ALR terms with oracle M_L and H_L at the pseudo-true point.

    The fit uses the population-whitened instrument basis so both sides refer to
    the same moment functions.
    """
    criterion = criterion or PopulationCriterion(oracle, config)
    if alpha_l0 is None:
        alpha_l0, _ = pseudo_true(oracle, config, criterion)
    bases = criterion.bases
    fit = psgel_fit(data, config, bases)
    riesz = build_m_l(alpha_l0, Ingredients.ORACLE, bases, config.tau, oracle=oracle, design=criterion.design)
    terms = alr_terms(data, fit, alpha_l0, riesz, bases, config.tau)
    terms["thetaHat"] = fit.theta_hat
    terms["thetaL0"] = alpha_l0.theta
    return terms


def riesz_bound_path(
    oracle: Oracle,
    config: FitConfig,
    orders: Sequence[int],
    bound: Optional[BoundResult] = None,
) -> list[dict[str, Any]]:
    """Oracle ||v*||_w^2 at the pseudo-true point along sieve orders K (J = K + 2 unless fixed)."""
    rows = []
    for k in orders:
        sieve = config.sieve.with_orders(int(k), config.sieve.j_order)
        fit_config = config.with_sieve(sieve)
        bases = population_bases(sieve, oracle.weight)
        criterion = PopulationCriterion(oracle, fit_config, bases)
        alpha_l0, _ = pseudo_true(oracle, fit_config, criterion)
        try:
            riesz = build_m_l(alpha_l0, Ingredients.ORACLE, bases, config.tau, oracle=oracle, design=criterion.design)
            norm_sq = riesz.vstar_norm**2
        except RankDeficiencyError as e:
            logger.warning("K=%d: %s", k, e)
            norm_sq = math.inf
        rows.append(
            {
                "k": int(k),
                "j": sieve.j,
                "vstarNormSq": norm_sq if math.isfinite(norm_sq) else None,
                "v0": bound.v0 if bound is not None and math.isfinite(bound.v0) else None,
            }
        )
    return rows


class InferenceService:
    """QLR tests, confidence sets and Riesz-representer diagnostics."""

    qlr = staticmethod(qlr)
    ci_invert = staticmethod(ci_invert)
    self_normalized_ci = staticmethod(self_normalized_ci)
    alr_check = staticmethod(alr_check)
    riesz_bound_path = staticmethod(riesz_bound_path)
