"""Exception hierarchy shared by every stage.

Each top-level category maps onto a CLI exit code so a batch scheduler can
tell configuration mistakes, bad data and numerical breakdowns apart.
"""

from dataclasses import dataclass
from typing import Optional


class ExoNodesError(Exception):
    """Base class for all errors raised by the package"""

    exit_code = 1


class ConfigError(ExoNodesError):
    exit_code = 2


class DataError(ExoNodesError):
    exit_code = 3


class NumericalError(ExoNodesError):
    exit_code = 4


# Data errors

class DegenerateSample(DataError):
    """A sample has no spread (all values identical)"""


class DegenerateSignal(DataError):
    """A candidate signal has zero variance"""


class MissingLabels(DataError):
    pass


class NodeMismatch(DataError):
    pass


class NonFiniteData(DataError):
    def __init__(self, message: str, path: Optional[str] = None, row: Optional[int] = None,
                 column: Optional[str] = None):
        super().__init__(message)
        self.path = path
        self.row = row
        self.column = column


class UnknownNode(DataError):
    pass


class CyclicSpec(DataError):
    pass


class DimensionMismatch(DataError):
    pass


class InsufficientSubjects(DataError):
    pass


class InvalidProfile(DataError):
    """Too many subjects were skipped while collecting a test profile"""


# Numerical errors

class NullEstimationFailure(NumericalError):
    pass


class SingularRegularization(NumericalError):
    pass


class NonFiniteLoss(NumericalError):
    def __init__(self, message: str, diagnostics: Optional[dict] = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class NoProgress(NumericalError):
    pass


class StabilityInvalid(NumericalError):
    pass


class StageFailure(ExoNodesError):
    """Wraps a failure with the pipeline stage it happened in"""

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage '{stage}' failed: {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause
        self.exit_code = getattr(cause, "exit_code", 1)


@dataclass(frozen=True)
class SubjectSkipped:
    """Record of a subject left out of a test profile"""

    subject_id: str
    reason: str
