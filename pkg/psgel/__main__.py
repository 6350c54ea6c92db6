"""Entry point for the psgel command line."""

import argparse
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path
from typing import Any, Optional

from psgel.app import ExperimentApp
from psgel.domain.enums import Ingredients
from psgel.domain.errors import ConfigurationError, IngestionError, PsgelError
from psgel.domain.models import FitConfig
from psgel.repository.dataset_csv import load_csv, write_csv
from psgel.repository.jsonl_repository import json_safe
from psgel.services.bound_service import BoundService
from psgel.services.dgp_service import DgpService
from psgel.services.estimator_service import EstimatorService
from psgel.services.inference_service import InferenceService
from psgel.services.moment_service import MomentService
from psgel.utils.config import ExperimentConfig
from psgel.utils.logging_setup import setup_logging

logger = logging.getLogger("psgel")

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_ESTIMATION = 2


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    """One ``--field`` flag per ExperimentConfig field; unset flags do not override."""
    group = parser.add_argument_group("configuration")
    for f in fields(ExperimentConfig):
        default = getattr(ExperimentConfig(), f.name)
        flag = "--" + f.name.replace("_", "-")
        if isinstance(default, list):
            item = type(default[0]) if default else float
            group.add_argument(flag, dest=f.name, type=item, nargs="+", default=None)
        elif default is None or isinstance(default, int):
            group.add_argument(flag, dest=f.name, type=int, default=None)
        elif isinstance(default, float):
            group.add_argument(flag, dest=f.name, type=float, default=None)
        else:
            group.add_argument(flag, dest=f.name, type=str, default=None)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, default=None, help="JSON configuration file")
    common.add_argument("-v", "--verbose", action="store_true")
    common.add_argument("-q", "--quiet", action="store_true")
    _add_config_flags(common)

    parser = argparse.ArgumentParser(
        prog="psgel",
        description="Penalized sieve GEL estimation and QLR inference for weighted average derivatives",
    )
    commands = parser.add_subparsers(dest="command", required=True)

    simulate_cmd = commands.add_parser("simulate", parents=[common], help="draw a dataset from the design")
    simulate_cmd.add_argument("--out", type=Path, required=True)

    fit_cmd = commands.add_parser("fit", parents=[common], help="PSGEL estimate of theta")
    fit_cmd.add_argument("--data", type=Path, required=True)

    qlr_cmd = commands.add_parser("qlr", parents=[common], help="QLR test of theta = nu")
    qlr_cmd.add_argument("--data", type=Path, required=True)
    qlr_cmd.add_argument("--nu", type=float, required=True)

    ci_cmd = commands.add_parser("ci", parents=[common], help="confidence sets for theta")
    ci_cmd.add_argument("--data", type=Path, required=True)

    commands.add_parser("bound", parents=[common], help="efficiency bound of the design")
    commands.add_parser("curvature", parents=[common], help="ill-posedness diagnostics of the design")

    report_cmd = commands.add_parser("report", parents=[common], help="tables from stored records")
    report_cmd.add_argument("results", type=Path)

    commands.add_parser("run", parents=[common], help="Monte Carlo experiment")
    return parser


def _config(args: argparse.Namespace) -> ExperimentConfig:
    config = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    overrides = {f.name: getattr(args, f.name, None) for f in fields(ExperimentConfig)}
    return config.with_overrides(overrides)


def _emit(payload: Any) -> None:
    print(json.dumps(json_safe(payload), indent=2, sort_keys=True))


def _fit_config(config: ExperimentConfig) -> FitConfig:
    """Standalone commands spread multistarts and grid points over ``workers`` processes."""
    return config.to_fit_config(config.master_seed, workers=config.workers)


def _simulate(config: ExperimentConfig, args: argparse.Namespace) -> None:
    dgp = config.to_dgp()
    data = DgpService.simulate(dgp, config.n, config.master_seed)
    path = write_csv(data, args.out)
    _emit({"path": str(path), "n": data.n, "theta0": DgpService.theta0(dgp, config.weight())})


def _fit(config: ExperimentConfig, args: argparse.Namespace) -> None:
    data = load_csv(args.data)
    fit = EstimatorService.fit(data, _fit_config(config))
    result = fit.to_dict()
    result["provenance"]["configHash"] = config.config_hash()
    _emit(result)


def _qlr(config: ExperimentConfig, args: argparse.Namespace) -> None:
    data = load_csv(args.data)
    _emit(InferenceService.qlr(data, _fit_config(config), args.nu).to_dict())


def _ci(config: ExperimentConfig, args: argparse.Namespace) -> None:
    data = load_csv(args.data)
    fit_config = _fit_config(config)
    bases = MomentService.build_bases(fit_config.sieve, data)
    fit = EstimatorService.fit(data, fit_config, bases)
    ingredients = Ingredients(config.ingredients)
    oracle = None
    if ingredients is Ingredients.ORACLE:
        oracle = DgpService.build_oracle(config.to_dgp(), config.weight())

    sets = {}
    for level in config.levels:
        region = InferenceService.ci_invert(data, fit_config, level, unrestricted=fit, bases=bases)
        interval, riesz = InferenceService.self_normalized_ci(
            data, fit_config, level, ingredients, fit=fit, oracle=oracle, bases=bases
        )
        sets[f"{level:g}"] = {
            "inversion": region.to_dict(),
            "selfNormalized": interval.to_dict(),
            "vstarNorm": riesz.vstar_norm,
        }
    _emit({"thetaHat": fit.theta_hat, "sets": sets})


def _bound(config: ExperimentConfig, args: argparse.Namespace) -> None:
    oracle = DgpService.build_oracle(config.to_dgp(), config.weight())
    op = BoundService.build_operator(oracle, config.bound_nw, config.bound_nx)
    bound = BoundService.v0_bound(op, oracle, config.tau, config.bound_threshold)
    sweep = BoundService.truncation_sweep(op, oracle, config.tau, config.truncation_ks)
    _emit(
        {
            "theta0": oracle.theta0,
            "bound": bound.to_dict(),
            "sweep": [{"kept": r.truncation_index, "v0": r.to_dict()["v0"]} for r in sweep],
        }
    )


def _curvature(config: ExperimentConfig, args: argparse.Namespace) -> None:
    oracle = DgpService.build_oracle(config.to_dgp(), config.weight())
    report = BoundService.varpi_profile(oracle, _fit_config(config), config.t_grid)
    _emit(report.to_dict())


def _report(config: ExperimentConfig, args: argparse.Namespace) -> None:
    app = ExperimentApp(config.with_overrides({"output_dir": str(args.results)}))
    _emit(app.report())


def _run(config: ExperimentConfig, args: argparse.Namespace) -> None:
    _emit(ExperimentApp(config).run())


COMMANDS = {
    "simulate": _simulate,
    "fit": _fit,
    "qlr": _qlr,
    "ci": _ci,
    "bound": _bound,
    "curvature": _curvature,
    "report": _report,
    "run": _run,
}


def main(argv: Optional[list[str]] = None) -> int:
    """Run the psgel command line; returns the process exit code."""
    args = build_parser().parse_args(argv)
    setup_logging(verbose=args.verbose, quiet=args.quiet)
    try:
        config = _config(args)
        COMMANDS[args.command](config, args)
    except (ConfigurationError, IngestionError) as e:
        logger.error("%s", e)
        return EXIT_CONFIG
    except PsgelError as e:
        logger.error("%s: %s", type(e).__name__, e)
        return EXIT_ESTIMATION
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
