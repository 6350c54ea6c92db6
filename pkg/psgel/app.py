"""Monte Carlo harness: seeded replications, persistence and summaries."""

import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict
from functools import cached_property
from pathlib import Path
from typing import Any, Callable, Optional

import numpy as np

from psgel.domain.enums import ExperimentMode, Ingredients
from psgel.domain.errors import ConfigurationError, EstimationError, PsgelError
from psgel.domain.models import FitConfig, FitResult, ParamPoint, RunRecord
from psgel.repository.jsonl_repository import JsonlRepository
from psgel.services.bound_service import BoundService, PopulationCriterion
from psgel.services.dgp_service import DgpService, Oracle
from psgel.services.estimator_service import EstimatorService
from psgel.services.inference_service import InferenceService
from psgel.services.moment_service import MomentService
from psgel.utils.config import ExperimentConfig
from psgel.utils.numerics import replication_seed
from psgel.utils.report import write_report

logger = logging.getLogger(__name__)

# oracle-only modes: one deterministic record regardless of reps
DETERMINISTIC_MODES = frozenset({ExperimentMode.BOUND, ExperimentMode.CURVATURE})


def _fit_summary(fit: FitResult) -> dict[str, Any]:
    return {
        "thetaHat": fit.theta_hat,
        "criterion": fit.criterion,
        "penValue": fit.pen_value,
        "winner": fit.provenance.get("winner"),
        "flags": dict(fit.flags),
    }


def _nu_grid(config: ExperimentConfig, theta_hat: float) -> list[float]:
    if config.nu_grid_halfwidth <= 0.0:
        return np.linspace(config.theta_lo, config.theta_hi, config.nu_grid_size).tolist()
    lo = max(config.theta_lo, theta_hat - config.nu_grid_halfwidth)
    hi = min(config.theta_hi, theta_hat + config.nu_grid_halfwidth)
    return np.linspace(lo, hi, config.nu_grid_size).tolist()


class ReplicationContext:
    """Per-run quantities shared by every replication."""

    def __init__(self, config: ExperimentConfig, theta0: float, alpha_l0: Optional[ParamPoint] = None):
        self.config = config
        self.theta0 = theta0
        self.alpha_l0 = alpha_l0

    @cached_property
    def oracle(self) -> Oracle:
        """Design oracle, built on first use; b = 0 designs raise OracleError here."""
        return DgpService.build_oracle(self.config.to_dgp(), self.config.weight())

    def to_job(self, index: int) -> tuple:
        alpha = None if self.alpha_l0 is None else self.alpha_l0.to_dict()
        return (asdict(self.config), index, self.theta0, alpha)

    @classmethod
    def from_job(cls, job: tuple) -> tuple["ReplicationContext", int]:
        config_data, index, theta0, alpha = job
        alpha_l0 = ParamPoint.from_dict(alpha) if alpha is not None else None
        return cls(ExperimentConfig.from_dict(config_data), theta0, alpha_l0), index


def needs_oracle(config: ExperimentConfig) -> bool:
    """Whether a run reads p_{W|X} or other oracle quantities beyond theta0."""
    mode = config.experiment_mode
    if mode in DETERMINISTIC_MODES or mode is ExperimentMode.ALR:
        return True
    return mode is ExperimentMode.CI_COVERAGE and Ingredients(config.ingredients) is Ingredients.ORACLE


def _estimate(ctx: ReplicationContext, data, fit_config: FitConfig) -> dict[str, Any]:
    fit = EstimatorService.fit(data, fit_config)
    return {"theta0": ctx.theta0, **_fit_summary(fit)}


def _qlr_size(ctx: ReplicationContext, data, fit_config: FitConfig) -> dict[str, Any]:
    result = InferenceService.qlr(data, fit_config, ctx.theta0)
    return {
        "theta0": ctx.theta0,
        "thetaHat": result.unrestricted.theta_hat,
        "statistic": result.statistic,
        "pvalue": result.pvalue,
        "flags": {**result.unrestricted.flags, **result.flags},
    }


def _ci_coverage(ctx: ReplicationContext, data, fit_config: FitConfig) -> dict[str, Any]:
    config = ctx.config
    bases = MomentService.build_bases(fit_config.sieve, data)
    fit = EstimatorService.fit(data, fit_config, bases)
    grid = _nu_grid(config, fit.theta_hat)
    ingredients = Ingredients(config.ingredients)
    oracle = ctx.oracle if ingredients is Ingredients.ORACLE else None

    inversion: dict[str, Any] = {}
    wald: dict[str, Any] = {}
    for level in config.levels:
        key = f"{level:g}"
        region = InferenceService.ci_invert(data, fit_config, level, grid, unrestricted=fit, bases=bases)
        inversion[key] = {
            "intervals": [list(interval) for interval in region.intervals],
            "covered": region.contains(ctx.theta0),
            "length": sum(hi - lo for lo, hi in region.intervals),
            "empty": region.empty,
        }
        try:
            interval, _ = InferenceService.self_normalized_ci(
                data, fit_config, level, ingredients, fit=fit, oracle=oracle, bases=bases
            )
            wald[key] = {
                "lower": interval.lower,
                "upper": interval.upper,
                "covered": interval.contains(ctx.theta0),
                "length": interval.width,
            }
        except PsgelError as e:
            logger.warning("self-normalized interval failed at level %s: %s", key, e)
            wald[key] = None
    return {
        "theta0": ctx.theta0,
        **_fit_summary(fit),
        "inversion": inversion,
        "selfNormalized": wald,
    }


def _alr(ctx: ReplicationContext, data, fit_config: FitConfig) -> dict[str, Any]:
    terms = InferenceService.alr_check(data, fit_config, ctx.oracle, ctx.alpha_l0)
    terms["theta0"] = ctx.theta0
    terms["standardized"] = math.sqrt(data.n) * (terms["thetaHat"] - ctx.theta0) / terms["vstarNorm"]
    return terms


HANDLERS: dict[ExperimentMode, Callable[..., dict[str, Any]]] = {
    ExperimentMode.ESTIMATE: _estimate,
    ExperimentMode.QLR_SIZE: _qlr_size,
    ExperimentMode.CI_COVERAGE: _ci_coverage,
    ExperimentMode.ALR: _alr,
}


def run_replication(ctx: ReplicationContext, index: int) -> RunRecord:
    """
    One seeded replication; library failures become a structured failure record.

    Raises:
        ConfigurationError: always propagated, it aborts the run
    """
    config = ctx.config
    seed = replication_seed(config.master_seed, index)
    started = time.perf_counter()
    payload: Optional[dict[str, Any]] = None
    failure: Optional[dict[str, str]] = None
    try:
        data = DgpService.simulate(config.to_dgp(), config.n, seed)
        payload = HANDLERS[config.experiment_mode](ctx, data, config.to_fit_config(seed))
    except ConfigurationError:
        raise
    except (PsgelError, ArithmeticError, np.linalg.LinAlgError, ValueError) as e:
        logger.warning("replication %d failed: %s: %s", index, type(e).__name__, e)
        failure = {"error": type(e).__name__, "message": str(e)}
    flags = dict(payload.get("flags", {})) if payload else {}
    return RunRecord(
        index=index,
        seed=seed,
        config_hash=config.config_hash(),
        payload=payload,
        failure=failure,
        wall_time=time.perf_counter() - started,
        flags=flags,
    )


def _run_job(job: tuple) -> RunRecord:
    ctx, index = ReplicationContext.from_job(job)
    return run_replication(ctx, index)


class ExperimentApp:
    """Runs an ExperimentConfig and writes records, summaries and the report."""

    def __init__(self, config: ExperimentConfig, repository: Optional[JsonlRepository] = None):
        self.config = config.validate()
        self.results_dir = Path(config.output_dir)
        self.repository = repository or JsonlRepository(self.results_dir)

    def run(self) -> dict[str, Any]:
        """
        Execute the pending replications and summarize every stored record.

        Replications already on disk under the same config hash are skipped.

        Raises:
            ConfigurationError: invalid configuration or unwritable output directory
            EstimationError: every replication failed
        """
        config = self.config
        mode = config.experiment_mode
        try:
            self.repository.init_store()
        except OSError as e:
            raise ConfigurationError(f"output directory {self.results_dir} is not writable: {e}") from e
        config.save(self.results_dir / "config.json")

        config_hash = config.config_hash()
        done = self.repository.completed_indices(config_hash)
        total = 1 if mode in DETERMINISTIC_MODES else config.reps
        pending = [i for i in range(total) if i not in done]
        if done:
            logger.info("Resuming: %d of %d replications already stored", len(done), total)

        dgp = config.to_dgp()
        theta0 = DgpService.theta0(dgp, config.weight())
        ctx = ReplicationContext(config, theta0)
        if needs_oracle(config):
            # b = 0 designs raise OracleError here, before any replication
            ctx.oracle
        if mode in DETERMINISTIC_MODES:
            if pending:
                self.repository.append(self._deterministic_record(ctx.oracle))
        elif pending:
            ctx.alpha_l0 = self._alpha_l0(ctx)
            self._run_pending(ctx, pending)

        records = self.repository.load(config_hash)
        summary = write_report(self.results_dir, records, self.repository.skipped, config)
        if records and not any(record.ok for record in records):
            raise EstimationError("every replication failed", diagnostics={"failures": len(records)})
        return summary

    def report(self) -> dict[str, Any]:
        """
        Rebuild tables from the stored records without running anything.

        When the directory holds a saved config.json only records of that configuration are
        read; records of other configurations count as skipped.
        """
        saved = self.results_dir / "config.json"
        config = ExperimentConfig.load(saved) if saved.exists() else None
        records = self.repository.load(config.config_hash() if config is not None else None)
        return write_report(self.results_dir, records, self.repository.skipped, config)

    def _alpha_l0(self, ctx: ReplicationContext) -> Optional[ParamPoint]:
        if self.config.experiment_mode is not ExperimentMode.ALR:
            return None
        fit_config = self.config.to_fit_config(self.config.master_seed)
        alpha_l0, _ = EstimatorService.pseudo_true(ctx.oracle, fit_config)
        return alpha_l0

    def _run_pending(self, ctx: ReplicationContext, pending: list[int]) -> None:
        workers = min(self.config.workers, len(pending))
        logger.info("Running %d replications on %d worker(s)", len(pending), workers)
        if workers > 1:
            jobs = [ctx.to_job(i) for i in pending]
            with ProcessPoolExecutor(max_workers=workers) as pool:
                for record in pool.map(_run_job, jobs):
                    self._store(record)
            return
        for index in pending:
            self._store(run_replication(ctx, index))

    def _store(self, record: RunRecord) -> None:
        self.repository.append(record)
        status = "ok" if record.ok else record.failure["error"]
        logger.info("replication %d: %s (%.1fs)", record.index, status, record.wall_time)

    def _deterministic_record(self, oracle: Oracle) -> RunRecord:
        config = self.config
        seed = replication_seed(config.master_seed, 0)
        fit_config = config.to_fit_config(seed)
        started = time.perf_counter()
        payload: Optional[dict[str, Any]] = None
        failure: Optional[dict[str, str]] = None
        try:
            if config.experiment_mode is ExperimentMode.BOUND:
                payload = self._bound_payload(oracle, fit_config)
            else:
                payload = self._curvature_payload(oracle, fit_config)
        except ConfigurationError:
            raise
        except (PsgelError, ArithmeticError, np.linalg.LinAlgError, ValueError) as e:
            logger.warning("%s computation failed: %s", config.mode, e)
            failure = {"error": type(e).__name__, "message": str(e)}
        return RunRecord(
            index=0,
            seed=seed,
            config_hash=config.config_hash(),
            payload=payload,
            failure=failure,
            wall_time=time.perf_counter() - started,
            flags=dict(payload.get("flags", {})) if payload else {},
        )

    def _bound_payload(self, oracle: Oracle, fit_config: FitConfig) -> dict[str, Any]:
        config = self.config
        op = BoundService.build_operator(oracle, config.bound_nw, config.bound_nx)
        bound = BoundService.v0_bound(op, oracle, config.tau, config.bound_threshold)
        sweep = BoundService.truncation_sweep(op, oracle, config.tau, config.truncation_ks)
        riesz = InferenceService.riesz_bound_path(oracle, fit_config, config.riesz_orders, bound)
        sieve_bound = EstimatorService.effective_sieve(oracle, fit_config, max(config.n, 3))
        return {
            "theta0": oracle.theta0,
            "bound": bound.to_dict(),
            "sweep": [{"kept": r.truncation_index, "v0": r.to_dict()["v0"]} for r in sweep],
            "rieszPath": riesz,
            "effectiveSieve": sieve_bound.to_dict(),
            "flags": {"bound_unreliable": not bound.reliable},
        }

    def _curvature_payload(self, oracle: Oracle, fit_config: FitConfig) -> dict[str, Any]:
        config = self.config
        report = BoundService.varpi_profile(oracle, fit_config, config.t_grid)
        by_order = []
        for k in config.curvature_orders:
            sieve = fit_config.sieve.with_orders(int(k), config.j_order)
            criterion = PopulationCriterion(oracle, fit_config.with_sieve(sieve))
            alpha_l0, _ = EstimatorService.pseudo_true(oracle, fit_config.with_sieve(sieve), criterion)
            info = BoundService.information_matrix(criterion, alpha_l0)
            by_order.append({"k": int(k), "j": sieve.j, "iLMinEig": float(np.linalg.eigvalsh(info)[0])})
        return {**report.to_dict(), "byOrder": by_order}
