"""Custom exceptions for the CHP dispatch engine."""


class ChpDispatchError(Exception):
    """Base exception for all CHP dispatch errors."""


class InstanceError(ChpDispatchError):
    """Raised when an instance file cannot be parsed or fails validation."""

    def __init__(self, message: str, violations: list[str] | None = None) -> None:
        super().__init__(message)
        self.violations = violations or []


class DimensionError(ChpDispatchError):
    """Raised when an array does not match the network dimensions."""


class ShiftFactorError(ChpDispatchError):
    """Raised when shift factors cannot be derived from the electric network."""


class DegenerateFlowError(ChpDispatchError):
    """Raised when no water reaches a node that has to serve heat load."""


class FlowBoundsError(ChpDispatchError):
    """Raised when a flow schedule violates the pipe flow bounds."""


class UnboundedProgramError(ChpDispatchError):
    """Raised when the dispatch program is unbounded (non-convex cost or open polytope)."""


class SolverError(ChpDispatchError):
    """Raised when the convex solver fails without a usable status."""


class StationaryPointError(ChpDispatchError):
    """Raised when the projected gradient vanishes and no step can be taken."""


class CutGenerationError(ChpDispatchError):
    """Raised when a feasibility cut is requested without a violation to cut."""


class CSVReadError(ChpDispatchError):
    """Raised when an input CSV file cannot be read or is invalid."""
