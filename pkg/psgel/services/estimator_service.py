"""Penalized sieve GEL estimation: unrestricted and theta-restricted fits."""

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import linalg, optimize

from psgel.domain.enums import PenaltyKind
from psgel.domain.errors import (
    ConfigurationError,
    EstimationError,
    InnerSolverError,
    OutOfDomainError,
)
from psgel.domain.models import (
    Dataset,
    EffectiveSieveBound,
    FitConfig,
    FitResult,
    InnerSolution,
    ParamPoint,
)
from psgel.services.bound_service import PopulationCriterion, truth_projection
from psgel.services.dgp_service import Oracle
from psgel.services.gel_service import GelFamily, maximize_multiplier, s_family
from psgel.services.moment_service import (
    Bases,
    MomentDesign,
    build_bases,
    g_matrix,
    population_g_converged,
)
from psgel.services.sieve_service import penalty_value, sobolev_control

logger = logging.getLogger(__name__)

DISAGREEMENT_TOLERANCE = 1e-4
POLISH_OFFSETS = (-2.0, -1.0, 1.0, 2.0)
POLISH_ROUNDS = 40


class ProfileCriterion:
    """sup_lambda S_hat(alpha, lambda) + gamma_K Pen(alpha) on one dataset."""

    def __init__(self, data: Dataset, config: FitConfig, bases: Optional[Bases] = None):
        self.config = config.validate()
        self.data = data
        self.bases = bases or build_bases(config.sieve, data)
        self.design = MomentDesign.from_data(data, self.bases)
        self.family: GelFamily = s_family(config.family)
        self.rejected = 0

    @property
    def n(self) -> int:
        return self.data.n

    def penalty(self, alpha: ParamPoint) -> float:
        return penalty_value(self.bases.penalty, alpha)

    def solve(self, alpha: ParamPoint, bandwidth: float = 0.0) -> InnerSolution:
        """Inner solution at alpha; raises on inner failure."""
        g = g_matrix(self.design, alpha, self.config.tau, bandwidth)
        return maximize_multiplier(g, self.family, self.config.inner_tol, self.config.inner_max_iter)

    def value(self, alpha: ParamPoint, bandwidth: float = 0.0) -> float:
        """Criterion at alpha; +inf for candidates whose inner problem fails."""
        try:
            inner = self.solve(alpha, bandwidth)
        except (InnerSolverError, OutOfDomainError) as e:
            self.rejected += 1
            logger.debug("candidate rejected: %s", e)
            return math.inf
        if not math.isfinite(inner.value):
            self.rejected += 1
            return math.inf
        return inner.value + self.bases.gamma_k * self.penalty(alpha)


def pilot_start(criterion: ProfileCriterion) -> ParamPoint:
    """Ridge regression of Y on phi^K(W); theta is the plug-in mean of mu(W) h'_pilot(W)."""
    design = criterion.design
    phi = design.phi
    gram = phi.T @ phi / design.n
    ridge = 1e-6 * max(float(np.trace(gram)), 1e-12) / phi.shape[1]
    pi = linalg.solve(gram + ridge * np.eye(phi.shape[1]), phi.T @ design.y / design.n, assume_a="pos")
    theta = float(np.mean(design.mu_w * (design.dphi @ pi)))
    config = criterion.config
    return ParamPoint(theta=min(max(theta, config.theta_lo), config.theta_hi), pi=pi)


@dataclass
class _Candidate:
    value: float
    x: np.ndarray
    label: str


@dataclass
class _StartOutcome:
    label: str
    best: _Candidate
    stage_exact: list[float] = field(default_factory=list)


class _OuterSearch:
    """Continuation Nelder-Mead plus exact coordinate polish over free coordinates.

    Free coordinates are (theta, pi) for the unrestricted fit and pi alone when
    theta is frozen at nu.
    """

    def __init__(self, criterion: ProfileCriterion, nu: Optional[float] = None):
        self.criterion = criterion
        self.config = criterion.config
        self.nu = nu
        self.trace: list[dict] = []

    def to_alpha(self, x: np.ndarray) -> ParamPoint:
        if self.nu is None:
            return ParamPoint.from_vector(x)
        return ParamPoint(theta=self.nu, pi=x)

    def to_free(self, alpha: ParamPoint) -> np.ndarray:
        return alpha.vector if self.nu is None else alpha.pi.copy()

    def _clip(self, x: np.ndarray) -> np.ndarray:
        if self.nu is None:
            x = x.copy()
            x[0] = min(max(x[0], self.config.theta_lo), self.config.theta_hi)
        return x

    def objective(self, bandwidth: float) -> Callable[[np.ndarray], float]:
        def f(x: np.ndarray) -> float:
            return self.criterion.value(self.to_alpha(self._clip(np.asarray(x, dtype=float))), bandwidth)

        return f

    def _simplex(self, x0: np.ndarray) -> np.ndarray:
        steps = 0.1 * (1.0 + np.abs(x0))
        simplex = np.tile(x0, (x0.size + 1, 1))
        for i in range(x0.size):
            step = steps[i]
            if self.nu is None and i == 0 and x0[0] + step > self.config.theta_hi:
                step = -step
            simplex[i + 1, i] += step
        return np.array([self._clip(row) for row in simplex])

    def stage(self, x0: np.ndarray, bandwidth: float) -> tuple[np.ndarray, float, int]:
        bounds = None
        if self.nu is None:
            bounds = [(self.config.theta_lo, self.config.theta_hi)] + [(None, None)] * (x0.size - 1)
        res = optimize.minimize(
            self.objective(bandwidth),
            x0,
            method="Nelder-Mead",
            bounds=bounds,
            options={
                "maxfev": self.config.stage_max_evals,
                "xatol": self.config.outer_tol,
                "fatol": self.config.outer_tol * 1e-2,
                "adaptive": True,
                "initial_simplex": self._simplex(x0),
            },
        )
        return self._clip(np.asarray(res.x, dtype=float)), float(res.fun), int(res.nfev)

    def polish(self, x: np.ndarray, fx: float) -> tuple[np.ndarray, float]:
        """Coordinate-wise grid search on the exact criterion with shrinking steps."""
        f = self.objective(0.0)
        step = 0.05 * (1.0 + np.abs(x))
        for _ in range(POLISH_ROUNDS):
            improved = False
            for c in range(x.size):
                best_x, best_f = None, fx
                for offset in POLISH_OFFSETS:
                    candidate = x.copy()
                    candidate[c] += offset * step[c]
                    candidate = self._clip(candidate)
                    fc = f(candidate)
                    if fc < best_f:
                        best_x, best_f = candidate, fc
                if best_x is not None:
                    x, fx, improved = best_x, best_f, True
            if not improved:
                step *= 0.5
                if np.max(step) < self.config.outer_tol:
                    break
        return x, fx

    def run_start(self, label: str, start: np.ndarray, schedule: Sequence[float]) -> _StartOutcome:
        exact = self.objective(0.0)
        x = self._clip(start)
        outcome = _StartOutcome(label=label, best=_Candidate(exact(x), x, f"{label}:start"))
        for bandwidth in schedule[:-1]:
            x, smoothed, nfev = self.stage(x, bandwidth)
            fx = exact(x)
            outcome.stage_exact.append(fx)
            self.trace.append(
                {"start": label, "bandwidth": bandwidth, "smoothed": _json_float(smoothed),
                 "exact": _json_float(fx), "evals": nfev}
            )
            if fx < outcome.best.value:
                outcome.best = _Candidate(fx, x, f"{label}:h={bandwidth:.4g}")
        x, fx = self.polish(outcome.best.x.copy(), outcome.best.value)
        outcome.stage_exact.append(fx)
        self.trace.append({"start": label, "bandwidth": 0.0, "exact": _json_float(fx)})
        if fx < outcome.best.value:
            outcome.best = _Candidate(fx, x, f"{label}:polish")
        logger.debug("start %s finished at %.10g", label, outcome.best.value)
        return outcome


def _json_float(value: float) -> Optional[float]:
    return float(value) if math.isfinite(value) else None


def _probes(criterion: ProfileCriterion, nu: Optional[float]) -> dict[str, ParamPoint]:
    """The ridge pilot and the zero function, with theta = nu when restricted."""
    pilot = pilot_start(criterion)
    zero = ParamPoint(theta=0.0, pi=np.zeros(criterion.bases.k))
    if nu is not None:
        pilot, zero = pilot.with_theta(nu), zero.with_theta(nu)
    return {"pilot": pilot, "zero": zero}


def _starts(
    criterion: ProfileCriterion,
    nu: Optional[float],
    warm_start: Optional[ParamPoint],
) -> list[tuple[str, ParamPoint]]:
    config = criterion.config
    probes = _probes(criterion, nu)
    pilot, zero = probes["pilot"], probes["zero"]

    starts = []
    if warm_start is not None:
        starts.append(("warm", warm_start if nu is None else warm_start.with_theta(nu)))
    starts.append(("pilot", pilot))
    if config.multistart >= 2:
        starts.append(("zero", zero))
    rng = np.random.default_rng(config.seed)
    for i in range(max(config.multistart - 2, 0)):
        scale = 0.5 * (1.0 + np.abs(pilot.vector))
        vector = pilot.vector + scale * rng.standard_normal(pilot.vector.size)
        vector[0] = nu if nu is not None else min(max(vector[0], config.theta_lo), config.theta_hi)
        starts.append((f"random{i}", ParamPoint.from_vector(vector)))
    return starts


def _penalty_bound(criterion: ProfileCriterion, alpha_hat: ParamPoint, probes: dict[str, ParamPoint]) -> dict:
    """gamma_K Pen(alpha_hat) <= sup_lambda S_hat(alpha) + gamma_K Pen(alpha) at each probe."""
    lhs = criterion.bases.gamma_k * criterion.penalty(alpha_hat)
    out = {}
    for name, probe in probes.items():
        rhs = criterion.value(probe)
        out[name] = {"lhs": lhs, "rhs": _json_float(rhs), "holds": bool(lhs <= rhs + 1e-12)}
    return out


def _run_start_job(job: tuple) -> tuple[_StartOutcome, list[dict], int]:
    data, config, bases, nu, label, start, schedule = job
    search = _OuterSearch(ProfileCriterion(data, config, bases), nu)
    outcome = search.run_start(label, start, schedule)
    return outcome, search.trace, search.criterion.rejected


def _run_starts(
    search: _OuterSearch, starts: list[tuple[str, ParamPoint]], schedule: Sequence[float]
) -> list[_StartOutcome]:
    """Every start in order; with workers > 1 they run on a process pool and merge in start order."""
    criterion = search.criterion
    free = [(label, search.to_free(start)) for label, start in starts]
    workers = min(criterion.config.workers, len(free))
    if workers <= 1:
        return [search.run_start(label, x, schedule) for label, x in free]

    jobs = [(criterion.data, criterion.config, criterion.bases, search.nu, label, x, schedule) for label, x in free]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        results = list(pool.map(_run_start_job, jobs))
    outcomes = []
    for outcome, trace, rejected in results:
        search.trace.extend(trace)
        criterion.rejected += rejected
        outcomes.append(outcome)
    return outcomes


def _fit(
    data: Dataset,
    config: FitConfig,
    nu: Optional[float],
    bases: Optional[Bases],
    warm_start: Optional[ParamPoint],
) -> FitResult:
    criterion = ProfileCriterion(data, config, bases)
    if nu is not None and not config.theta_lo <= nu <= config.theta_hi:
        raise ConfigurationError(f"nu = {nu} lies outside [{config.theta_lo}, {config.theta_hi}]")

    flags: dict[str, bool] = {}
    j, k = criterion.bases.j, criterion.bases.k
    if data.n <= j + k + 2:
        flags["small_sample"] = True
        logger.warning("n = %d does not exceed J + K + 2 = %d", data.n, j + k + 2)

    search = _OuterSearch(criterion, nu)
    schedule = config.schedule(data.n)
    starts = _starts(criterion, nu, warm_start)
    outcomes = _run_starts(search, starts, schedule)
    finite = [o for o in outcomes if math.isfinite(o.best.value)]
    if not finite:
        raise EstimationError(
            "every start failed the inner solve",
            diagnostics={"starts": [label for label, _ in starts], "rejected": criterion.rejected},
        )

    finite.sort(key=lambda o: o.best.value)
    winner = finite[0]
    best_x, best_value, best_label = winner.best.x, winner.best.value, winner.best.label
    probes = _probes(criterion, nu)
    for name, probe in probes.items():
        probe_value = criterion.value(probe)
        if probe_value < best_value:
            best_x, best_value, best_label = search.to_free(probe), probe_value, f"probe:{name}"
    if len(finite) >= 2:
        gap = finite[1].best.value - winner.best.value
        if gap > DISAGREEMENT_TOLERANCE * (1.0 + abs(winner.best.value)):
            flags["multistart_disagreement"] = True
            logger.warning("multistart minima disagree by %.3g", gap)

    last = winner.stage_exact[-3:]
    if any(b > a + 1e-12 for a, b in zip(last, last[1:])):
        flags["non_monotone_continuation"] = True
        logger.warning("exact criterion rose across the final continuation stages")

    alpha_hat = search.to_alpha(best_x)
    inner = criterion.solve(alpha_hat)
    pen = criterion.penalty(alpha_hat)
    value = inner.value + criterion.bases.gamma_k * pen
    flags["boundary_hit"] = inner.boundary_hit
    if inner.ridge > 0.0:
        flags["inner_ridge"] = True
    if criterion.rejected:
        logger.info("%d candidate points rejected as infeasible", criterion.rejected)

    bound_check = _penalty_bound(criterion, alpha_hat, probes)
    if not all(entry["holds"] for entry in bound_check.values()):
        flags["penalty_bound_violated"] = True
        logger.warning("penalty bound fails at %s", bound_check)

    sup_dh, sup_bound = None, None
    if PenaltyKind(config.sieve.penalty) is PenaltyKind.SOBOLEV12:
        bases = criterion.bases
        sup_dh, sup_bound = sobolev_control(bases.h, bases.penalty, alpha_hat, bases.weight.mu)
        if sup_dh > sup_bound:
            flags["sobolev_control_violated"] = True
            logger.warning("sup |mu h'| = %.4g exceeds the Sobolev bound %.4g", sup_dh, sup_bound)

    return FitResult(
        alpha_hat=alpha_hat,
        criterion=value,
        inner=inner,
        pen_value=pen,
        trace=search.trace,
        flags=flags,
        nu=nu,
        provenance={
            "family": config.family.value,
            "n": data.n,
            "j": j,
            "k": k,
            "gammaK": criterion.bases.gamma_k,
            "schedule": schedule,
            "winner": best_label,
            "startValues": {o.label: _json_float(o.best.value) for o in outcomes},
            "rejected": criterion.rejected,
            "penaltyBound": bound_check,
            "supWeightedDerivative": sup_dh,
            "sobolevBound": sup_bound,
        },
    )


def psgel_fit(
    data: Dataset,
    config: FitConfig,
    bases: Optional[Bases] = None,
    warm_start: Optional[ParamPoint] = None,
) -> FitResult:
    """
    Unrestricted PSGEL estimate.

    Args:
        data: Sample
        config: Outer-optimization settings
        bases: Prebuilt bases; by default the instrument basis is whitened on ``data``
        warm_start: Extra starting point tried before the pilot

    Returns:
        Best exact-criterion point over all starts, continuation stages and polish

    Raises:
        EstimationError: every start failed the inner solve
    """
    logger.info("fitting n=%d J=%d K=%d family=%s", data.n, config.sieve.j, config.sieve.k, config.family.value)
    result = _fit(data, config, None, bases, warm_start)
    logger.info("theta_hat = %.6g, criterion = %.6g", result.theta_hat, result.criterion)
    return result


def psgel_fit_restricted(
    data: Dataset,
    config: FitConfig,
    nu: float,
    bases: Optional[Bases] = None,
    warm_start: Optional[ParamPoint] = None,
) -> FitResult:
    """PSGEL fit with theta frozen at nu; the search runs over pi only."""
    result = _fit(data, config, float(nu), bases, warm_start)
    logger.debug("restricted fit at nu = %.6g, criterion = %.6g", nu, result.criterion)
    return result


def refine_fit(
    data: Dataset, config: FitConfig, start: ParamPoint, bases: Optional[Bases] = None
) -> FitResult:
    """Unrestricted exact-criterion polish from a given point."""
    criterion = ProfileCriterion(data, config, bases)
    search = _OuterSearch(criterion)
    x = search.to_free(start)
    x, fx = search.polish(x, search.objective(0.0)(x))
    if not math.isfinite(fx):
        raise EstimationError("refinement start is infeasible", diagnostics={"start": start.to_dict()})
    alpha = search.to_alpha(x)
    inner = criterion.solve(alpha)
    pen = criterion.penalty(alpha)
    return FitResult(
        alpha_hat=alpha,
        criterion=inner.value + criterion.bases.gamma_k * pen,
        inner=inner,
        pen_value=pen,
        trace=[{"start": "refine", "bandwidth": 0.0, "exact": _json_float(fx)}],
        flags={"boundary_hit": inner.boundary_hit},
        provenance={"family": config.family.value, "n": data.n, "refinedFrom": start.to_dict()},
    )


def pseudo_true(
    oracle: Oracle,
    config: FitConfig,
    criterion: Optional[PopulationCriterion] = None,
) -> tuple[ParamPoint, dict]:
    """
    alpha_L0 = argmin of Q_J(alpha, P) + gamma_K Pen(alpha) over the sieve.

    Starts from Pi_K alpha0 and from the zero function.

    Raises:
        EstimationError: the minimizer is not finite
    """
    criterion = criterion or PopulationCriterion(oracle, config)
    starts = [
        truth_projection(oracle, criterion.bases),
        ParamPoint(theta=0.0, pi=np.zeros(criterion.bases.k)),
    ]
    alpha, info = criterion.minimize(starts, (config.theta_lo, config.theta_hi))
    if not np.all(np.isfinite(alpha.vector)):
        raise EstimationError("pseudo-true minimization diverged", diagnostics=info)
    if info["projectedGradient"] > 1e-6:
        logger.warning("pseudo-true point projected gradient %.3g", info["projectedGradient"])
    info["flags"] = dict(criterion.flags)
    return alpha, info


def effective_sieve(
    oracle: Oracle,
    config: FitConfig,
    n: int,
    criterion: Optional[PopulationCriterion] = None,
) -> EffectiveSieveBound:
    """
    Constituents of the effective-sieve radius at sample size n.

    gbar0^2 = theta_bar + ||mu (Pi_K h0)'||^2 + b_{2,J}^2 with theta_bar = max over
    the theta box of theta^2; Gamma = gbar0^2 / n + ||E g(Pi_K alpha0)||^2 + gamma_K Pen(Pi_K alpha0);
    mho = l_n Gamma / gamma_K with l_n = log log n.
    """
    if n < 3:
        raise ConfigurationError(f"log log n needs n >= 3, got {n}")
    criterion = criterion or PopulationCriterion(oracle, config)
    bases, design = criterion.bases, criterion.design
    grid = design.grid
    projection = truth_projection(oracle, bases)

    theta_bar = max(config.theta_lo**2, config.theta_hi**2)
    weighted_derivative = design.mu_w * (design.dphi @ projection.pi)
    derivative_sq = float(grid.expect(weighted_derivative**2))
    b2 = float(grid.expect(np.sum(design.q**2, axis=1)))
    gbar0_sq = theta_bar + derivative_sq + b2

    bias = population_g_converged(projection, oracle, bases, config.tau)
    bias_sq = float(bias @ bias)
    pen_term = bases.gamma_k * penalty_value(bases.penalty, projection)
    gamma_big = gbar0_sq / n + bias_sq + pen_term
    l_n = math.log(math.log(n))
    mho = l_n * gamma_big / bases.gamma_k if bases.gamma_k > 0.0 else math.inf
    return EffectiveSieveBound(
        gamma_big=gamma_big, gbar0_sq=gbar0_sq, mho=mho, l_n=l_n, bias_sq=bias_sq, pen_term=pen_term
    )


class EstimatorService:
    """PSGEL fits of theta and their population counterparts."""

    fit = staticmethod(psgel_fit)
    fit_restricted = staticmethod(psgel_fit_restricted)
    pseudo_true = staticmethod(pseudo_true)
    effective_sieve = staticmethod(effective_sieve)
