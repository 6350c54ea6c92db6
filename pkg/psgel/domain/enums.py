"""Enums for domain models."""

from enum import Enum


class GelKind(str, Enum):
    """GEL carrier families."""

    EL = "el"
    ET = "et"
    CUE = "cue"


class BasisKind(str, Enum):
    """Sieve and instrument basis families on [0, 1]."""

    BSPLINE = "bspline"
    LEGENDRE = "legendre"
    COSINE = "cosine"


class PenaltyKind(str, Enum):
    """Sobolev quadratic penalty variants."""

    SOBOLEV1 = "sobolev1"
    SOBOLEV12 = "sobolev12"


class TrueFunction(str, Enum):
    """Shipped structural functions h0 for the simulation designs."""

    CONSTANT = "constant"
    LINEAR = "linear"
    QUADRATIC = "quadratic"
    SINE = "sine"


class Ingredients(str, Enum):
    """Source of the density ingredients of the moment Jacobian."""

    ORACLE = "oracle"
    PLUG_IN = "plug_in"


class ExperimentMode(str, Enum):
    """Monte Carlo harness modes."""

    ESTIMATE = "estimate"
    QLR_SIZE = "qlr_size"
    CI_COVERAGE = "ci_coverage"
    BOUND = "bound"
    CURVATURE = "curvature"
    ALR = "alr"
