"""Domain models and errors."""

from psgel.domain.enums import (
    BasisKind,
    ExperimentMode,
    GelKind,
    Ingredients,
    PenaltyKind,
    TrueFunction,
)
from psgel.domain.models import (
    BoundResult,
    ConfidenceSet,
    CurvatureReport,
    Dataset,
    DgpSpec,
    EffectiveSieveBound,
    FitConfig,
    FitResult,
    InnerSolution,
    Interval,
    ParamPoint,
    QlrResult,
    RieszData,
    RunRecord,
    SieveSpec,
    WeightFn,
)

__all__ = [
    "Dataset",
    "DgpSpec",
    "SieveSpec",
    "ParamPoint",
    "InnerSolution",
    "FitConfig",
    "FitResult",
    "EffectiveSieveBound",
    "QlrResult",
    "ConfidenceSet",
    "Interval",
    "RieszData",
    "BoundResult",
    "CurvatureReport",
    "RunRecord",
    "WeightFn",
    "GelKind",
    "BasisKind",
    "PenaltyKind",
    "TrueFunction",
    "Ingredients",
    "ExperimentMode",
]
