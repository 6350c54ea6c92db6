"""Data models for the application."""

import math
from dataclasses import dataclass, field
from functools import partial
from typing import Any, Callable, Optional

import numpy as np

from psgel.domain.enums import BasisKind, GelKind, PenaltyKind, TrueFunction
from psgel.domain.errors import ConfigurationError


def _frozen_array(values: Any) -> np.ndarray:
    array = np.array(values, dtype=float)
    array.flags.writeable = False
    return array


def _finite_or_none(value: float) -> Optional[float]:
    """JSON has no inf/nan; encode them as None."""
    return float(value) if math.isfinite(value) else None


def _float_or_inf(value: Optional[float]) -> float:
    return math.inf if value is None else float(value)


@dataclass(frozen=True)
class Dataset:
    """Observed (Y, W, X) triples."""

    y: np.ndarray
    w: np.ndarray
    x: np.ndarray

    def __post_init__(self) -> None:
        y, w, x = (_frozen_array(v) for v in (self.y, self.w, self.x))
        if y.ndim != 1 or w.ndim != 1 or x.ndim != 1:
            raise ConfigurationError("dataset columns must be one-dimensional")
        if not (len(y) == len(w) == len(x)) or len(y) < 1:
            raise ConfigurationError(
                f"dataset columns must share a length >= 1, got {len(y)}, {len(w)}, {len(x)}"
            )
        for name, column in (("y", y), ("w", w), ("x", x)):
            bad = np.flatnonzero(~np.isfinite(column))
            if bad.size:
                raise ConfigurationError(f"non-finite {name} at observation {int(bad[0])}")
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "w", w)
        object.__setattr__(self, "x", x)

    @property
    def n(self) -> int:
        """Number of observations."""
        return len(self.y)

    def subset(self, indices: np.ndarray) -> "Dataset":
        """Rows at the given indices, in order."""
        return Dataset(y=self.y[indices], w=self.w[indices], x=self.x[indices])

    def to_dict(self) -> dict[str, Any]:
        """Convert to dictionary for serialization."""
        return {"y": self.y.tolist(), "w": self.w.tolist(), "x": self.x.tolist()}

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "Dataset":
        """Create from dictionary."""
        return cls(y=data["y"], w=data["w"], x=data["x"])


def _bump(w: np.ndarray, scale: float) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    return scale * w**2 * (1.0 - w) ** 2


def _bump_derivative(w: np.ndarray, scale: float) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    return 2.0 * scale * w * (1.0 - w) * (1.0 - 2.0 * w)


@dataclass(frozen=True)
class WeightFn:
    """Nonnegative weight mu of the average derivative, with its derivative."""

    mu: Callable[[np.ndarray], np.ndarray]
    dmu: Callable[[np.ndarray], np.ndarray]
    scale: float = 16.0

    @classmethod
    def default(cls, scale: float = 16.0) -> "WeightFn":
        """mu(w) = scale * w^2 (1 - w)^2; scale 16 puts the maximum at 1."""
        return cls(
            mu=partial(_bump, scale=scale),
            dmu=partial(_bump_derivative, scale=scale),
            scale=scale,
        )


@dataclass(frozen=True)
class DgpSpec:
    """Gaussian-copula triangular design satisfying the quantile IV restriction."""

    tau: float = 0.5
    h0: TrueFunction = TrueFunction.QUADRATIC
    a: float = 1.0
    rho_e: float = 0.5
    sigma: float = 1.0
    b: float = 1.0

    def validate(self) -> "DgpSpec":
        """Raise ConfigurationError on invalid fields."""
        if not 0.0 < self.tau < 1.0:
            raise ConfigurationError(f"tau must lie in (0, 1), got {self.tau}")
        if not self.sigma > 0.0:
            raise ConfigurationError(f"sigma must be positive, got {self.sigma}")
        if not abs(self.rho_e) < 1.0:
            raise ConfigurationError(f"rho_e must lie in (-1, 1), got {self.rho_e}")
        if not (math.isfinite(self.a) and math.isfinite(self.b)):
            raise ConfigurationError("instrument strength and mixing must be finite")
        return self

    def to_dict(self) -> dict[str, Any]:
        """Convert to dictionary for serialization."""
        return {
            "tau": self.tau,
            "h0": self.h0.value,
            "a": self.a,
            "rho_e": self.rho_e,
            "sigma": self.sigma,
            "b": self.b,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "DgpSpec":
        """Create from dictionary."""
        return cls(
            tau=float(data.get("tau", 0.5)),
            h0=TrueFunction(data.get("h0", "quadratic")),
            a=float(data.get("a", 1.0)),
            rho_e=float(data.get("rho_e", 0.5)),
            sigma=float(data.get("sigma", 1.0)),
            b=float(data.get("b", 1.0)),
        )


@dataclass(frozen=True)
class SieveSpec:
    """Regularizing structure: instrument order J, sieve order K, bases and penalty."""

    k_order: int = 3
    j_order: Optional[int] = None
    h_basis: BasisKind = BasisKind.LEGENDRE
    q_basis: BasisKind = BasisKind.LEGENDRE
    degree: int = 3
    gamma_k: float = 1e-4
    penalty: PenaltyKind = PenaltyKind.SOBOLEV12

    @property
    def j(self) -> int:
        """Instrument order; defaults to K + 2."""
        return self.j_order if self.j_order is not None else self.k_order + 2

    @property
    def k(self) -> int:
        """Sieve order."""
        return self.k_order

    def validate(self) -> "SieveSpec":
        """Raise ConfigurationError on invalid fields."""
        if self.k_order < 1:
            raise ConfigurationError(f"K must be >= 1, got {self.k_order}")
        if self.j < 1:
            raise ConfigurationError(f"J must be >= 1, got {self.j}")
        if not self.gamma_k >= 0.0:
            raise ConfigurationError(f"gamma_K must be >= 0, got {self.gamma_k}")
        if self.degree < 0:
            raise ConfigurationError(f"spline degree must be >= 0, got {self.degree}")
        return self

    def with_orders(self, k_order: int, j_order: Optional[int] = None) -> "SieveSpec":
        """Copy with new (K, J)."""
        return SieveSpec(
            k_order=k_order,
            j_order=j_order,
            h_basis=self.h_basis,
            q_basis=self.q_basis,
            degree=self.degree,
            gamma_k=self.gamma_k,
            penalty=self.penalty,
        )

    def to_dict(self) -> dict[str, Any]:
        """Convert to dictionary for serialization."""
        return {
            "k_order": self.k_order,
            "j_order": self.j,
            "h_basis": self.h_basis.value,
            "q_basis": self.q_basis.value,
            "degree": self.degree,
            "gamma_k": self.gamma_k,
            "penalty": self.penalty.value,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "SieveSpec":
        """Create from dictionary."""
        j_order = data.get("j_order")
        return cls(
            k_order=int(data.get("k_order", 3)),
            j_order=int(j_order) if j_order is not None else None,
            h_basis=BasisKind(data.get("h_basis", "legendre")),
            q_basis=BasisKind(data.get("q_basis", "legendre")),
            degree=int(data.get("degree", 3)),
            gamma_k=float(data.get("gamma_k", 1e-4)),
            penalty=PenaltyKind(data.get("penalty", "sobolev12")),
        )


@dataclass(frozen=True)
class ParamPoint:
    """Candidate alpha = (theta, pi) with pi the sieve coefficients of h."""

    theta: float
    pi: np.ndarray

    def __post_init__(self) -> None:
        pi = _frozen_array(self.pi).reshape(-1)
        if not (math.isfinite(self.theta) and np.all(np.isfinite(pi))):
            raise ConfigurationError("parameter point must be finite")
        object.__setattr__(self, "theta", float(self.theta))
        object.__setattr__(self, "pi", pi)

    @property
    def k(self) -> int:
        """Number of sieve coefficients."""
        return len(self.pi)

    @property
    def vector(self) -> np.ndarray:
        """Stacked (theta, pi)."""
        return np.concatenate(([self.theta], self.pi))

    @classmethod
    def from_vector(cls, vector: np.ndarray) -> "ParamPoint":
        """Inverse of ``vector``."""
        vector = np.asarray(vector, dtype=float)
        return cls(theta=float(vector[0]), pi=vector[1:])

    def with_theta(self, theta: float) -> "ParamPoint":
        """Copy with theta replaced."""
        return ParamPoint(theta=theta, pi=self.pi)

    def to_dict(self) -> dict[str, Any]:
        """Convert to dictionary for serialization."""
        return {"theta": self.theta, "pi": self.pi.tolist()}

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "ParamPoint":
        """Create from dictionary."""
        return cls(theta=data["theta"], pi=data["pi"])


@dataclass
class InnerSolution:
    """Maximizer of the sample GEL objective over the multiplier."""

    lambda_: np.ndarray
    value: float
    gradient_norm: float
    iterations: int
    boundary_hit: bool = False
    converged: bool = True
    ridge: float = 0.0
    trace: list[float] = field(default_factory=list)

    def to_dict(self) -> dict[str, Any]:
        """Convert to dictionary for serialization."""
        return {
            "lambda": np.asarray(self.lambda_).tolist(),
            "value": self.value,
            "gradientNorm": self.gradient_norm,
            "iterations": self.iterations,
            "boundaryHit": self.boundary_hit,
            "converged": self.converged,
            "ridge": self.ridge,
            "trace": list(self.trace),
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "InnerSolution":
        """Create from dictionary."""
        return cls(
            lambda_=np.asarray(data["lambda"], dtype=float),
            value=data["value"],
            gradient_norm=data.get("gradientNorm", 0.0),
            iterations=data.get("iterations", 0),
            boundary_hit=data.get("boundaryHit", False),
            converged=data.get("converged", True),
            ridge=data.get("ridge", 0.0),
            trace=data.get("trace", []),
        )


@dataclass(frozen=True)
class FitConfig:
    """Outer-optimization settings for the PSGEL estimator."""

    sieve: SieveSpec = field(default_factory=SieveSpec)
    family: GelKind = GelKind.EL
    tau: float = 0.5
    theta_lo: float = -5.0
    theta_hi: float = 5.0
    bandwidth_multipliers: tuple[float, ...] = (4.0, 2.0, 1.0, 0.5, 0.25)
    multistart: int = 3
    outer_tol: float = 1e-6
    seed: int = 0
    inner_tol: float = 1e-9
    inner_max_iter: int = 100
    stage_max_evals: int = 600
    workers: int = 1

    def validate(self) -> "FitConfig":
        """Raise ConfigurationError on invalid fields."""
        self.sieve.validate()
        if not 0.0 < self.tau < 1.0:
            raise ConfigurationError(f"tau must lie in (0, 1), got {self.tau}")
        if not (math.isfinite(self.theta_lo) and math.isfinite(self.theta_hi)):
            raise ConfigurationError("theta box must be bounded")
        if not self.theta_lo < self.theta_hi:
            raise ConfigurationError("theta box must have theta_lo < theta_hi")
        multipliers = np.asarray(self.bandwidth_multipliers, dtype=float)
        if multipliers.size == 0 or np.any(multipliers <= 0.0):
            raise ConfigurationError("bandwidth multipliers must be positive")
        if np.any(np.diff(multipliers) >= 0.0):
            raise ConfigurationError("smoothing schedule must be strictly decreasing")
        if self.multistart < 1:
            raise ConfigurationError("multistart must be >= 1")
        if self.workers < 1:
            raise ConfigurationError("workers must be >= 1")
        return self

    def schedule(self, n: int) -> list[float]:
        """Bandwidths n^(-1/5) * multipliers, ending with 0 (exact indicator)."""
        scale = float(n) ** (-0.2)
        return [scale * m for m in self.bandwidth_multipliers] + [0.0]

    def with_sieve(self, sieve: SieveSpec) -> "FitConfig":
        """Copy with a different sieve specification."""
        data = self.to_dict()
        data["sieve"] = sieve.to_dict()
        return FitConfig.from_dict(data)

    def to_dict(self) -> dict[str, Any]:
        """Convert to dictionary for serialization."""
        return {
            "sieve": self.sieve.to_dict(),
            "family": self.family.value,
            "tau": self.tau,
            "thetaLo": self.theta_lo,
            "thetaHi": self.theta_hi,
            "bandwidthMultipliers": list(self.bandwidth_multipliers),
            "multistart": self.multistart,
            "outerTol": self.outer_tol,
            "seed": self.seed,
            "innerTol": self.inner_tol,
            "innerMaxIter": self.inner_max_iter,
            "stageMaxEvals": self.stage_max_evals,
            "workers": self.workers,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "FitConfig":
        """Create from dictionary."""
        return cls(
            sieve=SieveSpec.from_dict(data.get("sieve", {})),
            family=GelKind(data.get("family", "el")),
            tau=float(data.get("tau", 0.5)),
            theta_lo=float(data.get("thetaLo", -5.0)),
            theta_hi=float(data.get("thetaHi", 5.0)),
            bandwidth_multipliers=tuple(
                float(m) for m in data.get("bandwidthMultipliers", (4.0, 2.0, 1.0, 0.5, 0.25))
            ),
            multistart=int(data.get("multistart", 3)),
            outer_tol=float(data.get("outerTol", 1e-6)),
            seed=int(data.get("seed", 0)),
            inner_tol=float(data.get("innerTol", 1e-9)),
            inner_max_iter=int(data.get("innerMaxIter", 100)),
            stage_max_evals=int(data.get("stageMaxEvals", 600)),
            workers=int(data.get("workers", 1)),
        )


@dataclass
class FitResult:
    """Outcome of a (possibly restricted) PSGEL fit."""

    alpha_hat: ParamPoint
    criterion: float
    inner: InnerSolution
    pen_value: float
    trace: list[dict[str, Any]] = field(default_factory=list)
    flags: dict[str, bool] = field(default_factory=dict)
    nu: Optional[float] = None
    provenance: dict[str, Any] = field(default_factory=dict)

    @property
    def theta_hat(self) -> float:
        """Estimated weighted average derivative."""
        return self.alpha_hat.theta

    @property
    def restricted(self) -> bool:
        """Whether theta was frozen during the fit."""
        return self.nu is not None

    def to_dict(self) -> dict[str, Any]:
        """Convert to dictionary for serialization."""
        return {
            "alphaHat": self.alpha_hat.to_dict(),
            "criterion": self.criterion,
            "inner": self.inner.to_dict(),
            "penValue": self.pen_value,
            "trace": self.trace,
            "flags": dict(self.flags),
            "nu": self.nu,
            "provenance": dict(self.provenance),
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "FitResult":
        """Create from dictionary."""
        return cls(
            alpha_hat=ParamPoint.from_dict(data["alphaHat"]),
            criterion=data["criterion"],
            inner=InnerSolution.from_dict(data["inner"]),
            pen_value=data.get("penValue", 0.0),
            trace=data.get("trace", []),
            flags=data.get("flags", {}),
            nu=data.get("nu"),
            provenance=data.get("provenance", {}),
        )


@dataclass
class EffectiveSieveBound:
    """Constituents of the effective-sieve radius."""

    gamma_big: float
    gbar0_sq: float
    mho: float
    l_n: float
    bias_sq: float = 0.0
    pen_term: float = 0.0

    def to_dict(self) -> dict[str, Any]:
        """Convert to dictionary for serialization."""
        return {
            "gammaBig": self.gamma_big,
            "gbar0Sq": self.gbar0_sq,
            "mho": _finite_or_none(self.mho),
            "lN": self.l_n,
            "biasSq": self.bias_sq,
            "penTerm": self.pen_term,
        }


@dataclass
class QlrResult:
    """Quasi-likelihood-ratio test of theta0 = nu."""

    statistic: float
    nu: float
    restricted: FitResult
    unrestricted: FitResult
    pvalue: float
    flags: dict[str, bool] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        """Convert to dictionary for serialization."""
        return {
            "statistic": self.statistic,
            "nu": self.nu,
            "pvalue": self.pvalue,
            "flags": dict(self.flags),
            "restricted": self.restricted.to_dict(),
            "unrestricted": self.unrestricted.to_dict(),
        }


@dataclass
class ConfidenceSet:
    """Union of intervals accepted by QLR test inversion."""

    intervals: list[tuple[float, float]]
    level: float
    critical_value: float
    grid: list[float] = field(default_factory=list)
    statistics: list[float] = field(default_factory=list)
    empty: bool = False
    argmin_nu: Optional[float] = None

    def contains(self, value: float) -> bool:
        """Whether value lies in one of the intervals."""
        return any(lo <= value <= hi for lo, hi in self.intervals)

    def to_dict(self) -> dict[str, Any]:
        """Convert to dictionary for serialization."""
        return {
            "intervals": [list(i) for i in self.intervals],
            "level": self.level,
            "criticalValue": self.critical_value,
            "grid": list(self.grid),
            "statistics": list(self.statistics),
            "empty": self.empty,
            "argminNu": self.argmin_nu,
        }


@dataclass
class Interval:
    """Closed interval estimate."""

    lower: float
    upper: float
    center: float
    level: float

    @property
    def width(self) -> float:
        return self.upper - self.lower

    def contains(self, value: float) -> bool:
        return self.lower <= value <= self.upper

    def to_dict(self) -> dict[str, Any]:
        """Convert to dictionary for serialization."""
        return {
            "lower": self.lower,
            "upper": self.upper,
            "center": self.center,
            "level": self.level,
        }


@dataclass
class RieszData:
    """Moment Jacobian, second-moment matrix and the theta Riesz representer."""

    g_jacobian: np.ndarray
    h_l: np.ndarray
    vstar_norm: float
    ustar: np.ndarray
    vstar: np.ndarray
    ridge: float = 0.0
    ingredients: str = "oracle"

    @property
    def information(self) -> np.ndarray:
        """M' H^-1 M, the Gram matrix of the weak inner product."""
        return self.g_jacobian.T @ np.linalg.solve(self.h_l, self.g_jacobian)

    def weak_inner(self, a: np.ndarray, b: np.ndarray) -> float:
        """<a, b>_w on sieve coordinates (theta, pi)."""
        return float(np.asarray(a) @ self.information @ np.asarray(b))

    def weak_norm(self, a: np.ndarray) -> float:
        """||a||_w on sieve coordinates (theta, pi)."""
        return math.sqrt(max(self.weak_inner(a, a), 0.0))

    def to_dict(self) -> dict[str, Any]:
        """Convert to dictionary for serialization."""
        return {
            "gJacobian": self.g_jacobian.tolist(),
            "hL": self.h_l.tolist(),
            "vstarNorm": self.vstar_norm,
            "ustar": self.ustar.tolist(),
            "vstar": self.vstar.tolist(),
            "ridge": self.ridge,
            "ingredients": self.ingredients,
        }


@dataclass
class BoundResult:
    """Semiparametric efficiency bound on a discretized operator."""

    v0: float
    eps_norm_sq: float
    correction_sq: float
    svd_spectrum: np.ndarray
    truncation_index: int
    threshold: float
    range_residual: float = 0.0
    kernel_component_norm: float = 0.0
    picard_partial_sums: np.ndarray = field(default_factory=lambda: np.zeros(0))
    decay_slope: float = float("nan")
    reliable: bool = True

    def to_dict(self) -> dict[str, Any]:
        """Convert to dictionary for serialization."""
        return {
            "v0": _finite_or_none(self.v0),
            "epsNormSq": self.eps_norm_sq,
            "correctionSq": _finite_or_none(self.correction_sq),
            "svdSpectrum": np.asarray(self.svd_spectrum).tolist(),
            "truncationIndex": self.truncation_index,
            "threshold": self.threshold,
            "rangeResidual": self.range_residual,
            "kernelComponentNorm": self.kernel_component_norm,
            "picardPartialSums": np.asarray(self.picard_partial_sums).tolist(),
            "decaySlope": _finite_or_none(self.decay_slope),
            "reliable": self.reliable,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "BoundResult":
        """Create from dictionary."""
        return cls(
            v0=_float_or_inf(data.get("v0")),
            eps_norm_sq=data["epsNormSq"],
            correction_sq=_float_or_inf(data.get("correctionSq")),
            svd_spectrum=np.asarray(data.get("svdSpectrum", []), dtype=float),
            truncation_index=data.get("truncationIndex", 0),
            threshold=data.get("threshold", 0.0),
            range_residual=data.get("rangeResidual", 0.0),
            kernel_component_norm=data.get("kernelComponentNorm", 0.0),
            picard_partial_sums=np.asarray(data.get("picardPartialSums", []), dtype=float),
            decay_slope=data.get("decaySlope") if data.get("decaySlope") is not None else float("nan"),
            reliable=data.get("reliable", True),
        )


@dataclass
class CurvatureReport:
    """Ill-posedness diagnostics of the population criterion."""

    q_j_values: list[float]
    varpi_samples: list[tuple[float, float]]
    i_l_min_eig: float
    boundary_minima: list[float] = field(default_factory=list)
    flags: dict[str, bool] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        """Convert to dictionary for serialization."""
        return {
            "qJValues": list(self.q_j_values),
            "varpiSamples": [list(s) for s in self.varpi_samples],
            "iLMinEig": self.i_l_min_eig,
            "boundaryMinima": list(self.boundary_minima),
            "flags": dict(self.flags),
        }


@dataclass
class RunRecord:
    """One Monte Carlo replication, as persisted in the JSON-lines store."""

    index: int
    seed: int
    config_hash: str
    payload: Optional[dict[str, Any]] = None
    failure: Optional[dict[str, str]] = None
    wall_time: float = 0.0
    flags: dict[str, bool] = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return self.payload is not None

    def to_dict(self) -> dict[str, Any]:
        """Convert to dictionary for serialization."""
        return {
            "index": self.index,
            "seed": self.seed,
            "configHash": self.config_hash,
            "payload": self.payload,
            "failure": self.failure,
            "wallTime": self.wall_time,
            "flags": dict(self.flags),
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "RunRecord":
        """Create from dictionary."""
        if data.get("payload") is None and data.get("failure") is None:
            raise ValueError("record carries neither payload nor failure")
        return cls(
            index=int(data["index"]),
            seed=int(data["seed"]),
            config_hash=data.get("configHash", ""),
            payload=data.get("payload"),
            failure=data.get("failure"),
            wall_time=data.get("wallTime", 0.0),
            flags=data.get("flags", {}),
        )
