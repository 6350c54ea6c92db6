"""Configuration management."""

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Optional

from psgel.domain.enums import ExperimentMode, GelKind, Ingredients
from psgel.domain.errors import ConfigurationError
from psgel.domain.models import DgpSpec, FitConfig, SieveSpec, WeightFn

logger = logging.getLogger(__name__)

CONFIG_PATH = Path.home() / ".config" / "psgel" / "config.json"

# execution-only fields; results do not depend on them
NOT_HASHED = frozenset({"output_dir", "workers"})


@dataclass
class ExperimentConfig:
    """Flat experiment configuration: design, sieve, fit, inference and harness settings."""

    # design
    tau: float = 0.5
    h0: str = "quadratic"
    a: float = 1.0
    rho_e: float = 0.5
    sigma: float = 1.0
    b: float = 1.0
    weight_scale: float = 16.0
    # sieve
    k_order: int = 3
    j_order: Optional[int] = None
    h_basis: str = "legendre"
    q_basis: str = "legendre"
    degree: int = 3
    gamma_k: float = 1e-4
    penalty: str = "sobolev12"
    # fit
    family: str = "el"
    theta_lo: float = -5.0
    theta_hi: float = 5.0
    bandwidth_multipliers: list[float] = field(default_factory=lambda: [4.0, 2.0, 1.0, 0.5, 0.25])
    multistart: int = 3
    outer_tol: float = 1e-6
    inner_tol: float = 1e-9
    inner_max_iter: int = 100
    stage_max_evals: int = 600
    # inference
    levels: list[float] = field(default_factory=lambda: [0.90, 0.95, 0.99])
    nu_grid_halfwidth: float = 1.0
    nu_grid_size: int = 21
    ingredients: str = "plug_in"
    # bound and curvature
    bound_nw: int = 64
    bound_nx: int = 64
    bound_threshold: float = 1e-8
    truncation_ks: list[int] = field(default_factory=lambda: [2, 4, 8, 16, 32])
    riesz_orders: list[int] = field(default_factory=lambda: [3, 5, 7])
    t_grid: list[float] = field(default_factory=lambda: [0.0, 0.05, 0.1, 0.2, 0.4, 0.8])
    curvature_orders: list[int] = field(default_factory=lambda: [3, 6, 9])
    # harness
    n: int = 500
    reps: int = 1
    master_seed: int = 0
    mode: str = "estimate"
    workers: int = 1
    output_dir: str = "results"

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "ExperimentConfig":
        """
        Build from a flat mapping, coercing numbers and rejecting unknown keys.

        Raises:
            ConfigurationError: unknown key, wrong type, or invalid value
        """
        known = {f.name: f for f in fields(cls)}
        unknown = sorted(set(data) - set(known))
        if unknown:
            raise ConfigurationError(f"unknown configuration keys: {', '.join(unknown)}")
        defaults = cls()
        values = {}
        for name, value in data.items():
            values[name] = _coerce(name, value, getattr(defaults, name))
        return cls(**values).validate()

    @classmethod
    def load(cls, path: Optional[Path] = None) -> "ExperimentConfig":
        """
        Load configuration from file.

        A missing default file yields the defaults; an explicitly named file must exist.
        """
        config_path = Path(path) if path is not None else CONFIG_PATH

        if not config_path.exists():
            if path is not None:
                raise ConfigurationError(f"no such config file: {config_path}")
            return cls()

        try:
            with open(config_path, encoding="utf-8") as f:
                data = json.load(f)
        except (json.JSONDecodeError, OSError) as e:
            raise ConfigurationError(f"cannot read {config_path}: {e}") from e
        if not isinstance(data, dict):
            raise ConfigurationError(f"{config_path} must hold a JSON object")
        logger.debug("Loaded configuration from %s", config_path)
        return cls.from_dict(data)

    def save(self, path: Optional[Path] = None) -> None:
        """Save configuration to file."""
        config_path = Path(path) if path is not None else CONFIG_PATH
        config_path.parent.mkdir(parents=True, exist_ok=True)

        with open(config_path, "w", encoding="utf-8") as f:
            json.dump(asdict(self), f, indent=2, sort_keys=True)

    def with_overrides(self, overrides: dict[str, Any]) -> "ExperimentConfig":
        """Copy with the non-None entries of ``overrides`` applied."""
        data = asdict(self)
        data.update({k: v for k, v in overrides.items() if v is not None})
        return ExperimentConfig.from_dict(data)

    def validate(self) -> "ExperimentConfig":
        """Raise ConfigurationError on invalid fields, including the nested specs."""
        if self.reps < 1:
            raise ConfigurationError(f"reps must be >= 1, got {self.reps}")
        if self.n < 2:
            raise ConfigurationError(f"n must be >= 2, got {self.n}")
        if self.workers < 1:
            raise ConfigurationError("workers must be >= 1")
        if any(not 0.0 < level < 1.0 for level in self.levels) or not self.levels:
            raise ConfigurationError("levels must lie in (0, 1)")
        if self.nu_grid_size < 2 or self.nu_grid_halfwidth < 0.0:
            raise ConfigurationError("nu grid needs >= 2 points and a non-negative half-width")
        if not self.weight_scale > 0.0:
            raise ConfigurationError("weight_scale must be positive")
        try:
            ExperimentMode(self.mode)
            Ingredients(self.ingredients)
        except ValueError as e:
            raise ConfigurationError(str(e)) from e
        self.to_dgp()
        self.to_fit_config()
        return self

    @property
    def experiment_mode(self) -> ExperimentMode:
        return ExperimentMode(self.mode)

    def to_dgp(self) -> DgpSpec:
        try:
            spec = DgpSpec.from_dict(
                {
                    "tau": self.tau,
                    "h0": self.h0,
                    "a": self.a,
                    "rho_e": self.rho_e,
                    "sigma": self.sigma,
                    "b": self.b,
                }
            )
        except ValueError as e:
            raise ConfigurationError(str(e)) from e
        return spec.validate()

    def to_sieve(self) -> SieveSpec:
        try:
            return SieveSpec.from_dict(
                {
                    "k_order": self.k_order,
                    "j_order": self.j_order,
                    "h_basis": self.h_basis,
                    "q_basis": self.q_basis,
                    "degree": self.degree,
                    "gamma_k": self.gamma_k,
                    "penalty": self.penalty,
                }
            ).validate()
        except ValueError as e:
            raise ConfigurationError(str(e)) from e

    def to_fit_config(self, seed: int = 0, workers: int = 1) -> FitConfig:
        """
        FitConfig for one fit.

        Harness replications keep one worker each; the standalone commands pass ``self.workers``.
        """
        try:
            family = GelKind(self.family)
        except ValueError as e:
            raise ConfigurationError(str(e)) from e
        return FitConfig(
            sieve=self.to_sieve(),
            family=family,
            tau=self.tau,
            theta_lo=self.theta_lo,
            theta_hi=self.theta_hi,
            bandwidth_multipliers=tuple(self.bandwidth_multipliers),
            multistart=self.multistart,
            outer_tol=self.outer_tol,
            seed=seed,
            inner_tol=self.inner_tol,
            inner_max_iter=self.inner_max_iter,
            stage_max_evals=self.stage_max_evals,
            workers=workers,
        ).validate()

    def weight(self) -> WeightFn:
        return WeightFn.default(self.weight_scale)

    def canonical_text(self) -> str:
        """Sorted-key compact JSON of every field that affects results."""
        data = {k: v for k, v in asdict(self).items() if k not in NOT_HASHED}
        return json.dumps(data, sort_keys=True, separators=(",", ":"))

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_text().encode("utf-8")).hexdigest()


def _coerce(name: str, value: Any, default: Any) -> Any:
    """Cast ``value`` to the type of the field default."""
    try:
        if isinstance(default, bool):
            if not isinstance(value, bool):
                raise TypeError
            return value
        if isinstance(default, list):
            if not isinstance(value, (list, tuple)):
                raise TypeError
            item_type = type(default[0]) if default else float
            return [_number(item, item_type) for item in value]
        if default is None:
            return None if value is None else _number(value, int)
        if isinstance(default, (int, float)):
            return _number(value, type(default))
        if isinstance(default, str):
            if not isinstance(value, str):
                raise TypeError
            return value
    except (TypeError, ValueError) as e:
        raise ConfigurationError(f"{name}: invalid value {value!r}") from e
    return value


def _number(value: Any, kind: type) -> Any:
    if isinstance(value, bool) or not isinstance(value, (int, float, str)):
        raise TypeError(value)
    if kind is int:
        number = float(value)
        if not number.is_integer():
            raise ValueError(value)
        return int(number)
    return float(value)
