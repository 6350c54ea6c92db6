"""Exception hierarchy."""

from typing import Any, Optional


class PsgelError(Exception):
    """Base class for all library errors."""


class ConfigurationError(PsgelError):
    """Invalid configuration or argument."""


class IngestionError(PsgelError):
    """A dataset file could not be parsed."""

    def __init__(self, message: str, row: Optional[int] = None):
        self.row = row
        if row is not None:
            message = f"row {row}: {message}"
        super().__init__(message)


class NumericalError(PsgelError):
    """Quadrature or another numerical routine missed its tolerance."""

    def __init__(self, message: str, achieved_tolerance: float = float("nan")):
        self.achieved_tolerance = achieved_tolerance
        super().__init__(f"{message} (achieved tolerance {achieved_tolerance:.3g})")


class OracleError(PsgelError):
    """Oracle densities are unavailable for this design."""


class DegenerateBasisError(PsgelError):
    """Empirical Gram of the instrument basis is numerically singular."""

    def __init__(self, eigenvalue: float, j_order: int):
        self.eigenvalue = eigenvalue
        self.j_order = j_order
        super().__init__(
            f"instrument Gram is rank deficient (min eigenvalue {eigenvalue:.3g}); "
            f"try a smaller J than {j_order}"
        )


class OutOfDomainError(PsgelError):
    """A multiplier puts some lambda'g_i outside the carrier domain."""

    def __init__(self, index: int, value: float):
        self.index = index
        self.value = value
        super().__init__(f"observation {index}: lambda'g = {value:.6g} outside the GEL domain")


class InnerSolverError(PsgelError):
    """The inner multiplier maximization failed."""


class EstimationError(PsgelError):
    """Every start of the outer minimization failed."""

    def __init__(self, message: str, diagnostics: Optional[dict[str, Any]] = None):
        self.diagnostics = diagnostics or {}
        super().__init__(message)


class OptimizerInconsistencyError(PsgelError):
    """The restricted fit beat the unrestricted fit beyond tolerance."""

    def __init__(self, message: str, traces: Optional[dict[str, Any]] = None):
        self.traces = traces or {}
        super().__init__(message)


class RankDeficiencyError(PsgelError):
    """M_L' H_L^-1 M_L is singular (the full-rank condition on the Jacobian fails)."""
