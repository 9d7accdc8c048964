"""Exception hierarchy shared by every module of the toolkit."""
from typing import Iterable, Optional


class ToolkitError(Exception):
    """Base class for all errors raised on purpose by the toolkit."""


class ConfigurationError(ToolkitError, ValueError):
    """Unknown family/capacity/metric, out-of-range depth, bad config key."""


class ShapeError(ToolkitError, ValueError):
    pass


class UnknownEntryError(ToolkitError, KeyError):
    """Lookup of an unregistered architecture, tap or metric."""

    def __str__(self) -> str:
        # KeyError quotes its message; keep it readable.
        return str(self.args[0]) if self.args else ""


class CompatibilityError(ToolkitError, ValueError):
    """Snapshot and network (or two snapshots) do not describe the same architecture."""


class UnsupportedOperationError(ToolkitError):
    pass


class DataError(ToolkitError, ValueError):
    """Empty split, empty eval set, empty trace."""


class IngestionError(DataError):
    def __init__(self, message: str, offenders: Optional[Iterable[str]] = None):
        self.offenders = sorted(offenders or [])
        if self.offenders:
            message = f"{message}: {', '.join(self.offenders)}"
        super().__init__(message)


class DegenerateInputError(ToolkitError, ValueError):
    pass


class EstimatorError(ToolkitError, ValueError):
    pass


class PairingError(ToolkitError, ValueError):
    pass


class NormalizationError(ToolkitError, ValueError):
    pass


class TrainingFailure(ToolkitError):
    def __init__(self, message: str, iteration: int):
        self.iteration = iteration
        super().__init__(f"{message} (iteration {iteration})")


class UndefinedMetricError(ToolkitError, ValueError):
    pass


class NumericalError(ToolkitError, ArithmeticError):
    pass


class ReportError(ToolkitError):
    pass
