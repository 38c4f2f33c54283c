"""
errors.py.

Exception hierarchy for the small-area IPW toolkit.

Every error raised by the library derives from `SaeIpwError` and carries the
process exit code the command-line front-end reports for it: 1 for user or
data problems, 2 for numerical failures.

Classes
-------
SaeIpwError
    Base class with `exit_code` and a machine-readable `to_record()`.
DataError, NumericalError
    The two exit-code families.
StageError
    Wraps another toolkit error with the pipeline stage that raised it.
"""

from collections.abc import Iterator
from contextlib import contextmanager
from typing import Any

# Default Error Messages
MISSING_COLUMN = "declared column '{column}' is missing from the input"
NON_BINARY_TREATMENT = "treatment value '{value}' on row {row} is not 0 or 1"
NON_BINARY_FLAG = "in_sample value '{value}' on row {row} is not 0 or 1"
NOT_A_NUMBER = "value '{value}' in column '{column}' on row {row} is not a number"
MISSING_OUTCOME = "sampled unit on row {row} has no outcome"
SAMPLE_TOO_LARGE = "area '{area}' asks for {size} units but has {available}"
NEGATIVE_RMSE = "rmse must be non-negative, got {rmse}"
OUTSIDE_UNIT_INTERVAL = "propensity must lie strictly inside (0, 1)"
SINGULAR_DESIGN = "fixed-effect design is rank deficient"
NO_CONVERGENCE = "{what} did not converge within {iterations} iterations"
SEPARATION = "complete separation detected ({where})"
CONSTANT_TREATMENT = "treatment is constant across the whole sample"
DEGENERATE_SANDWICH = "every residual lies in the Huber rejection region"
TOO_MANY_FAILURES = "{failed} of {total} bootstrap replications failed"
MISSING_DECOMPOSITION = "area table carries no treated/control decomposition"
UNKNOWN_SCENARIO = "unknown scenario '{scenario}'"


class SaeIpwError(Exception):
    """
    Base class for every toolkit error.

    Parameters
    ----------
    message : str
        Human readable description.
    **context : Any
        Extra fields copied into the error record.
    """

    exit_code: int = 1

    def __init__(self, message: str, **context: Any) -> None:
        super().__init__(message)
        self.message = message
        self.context = context

    def to_record(self) -> dict[str, Any]:
        """
        Build the machine-readable error record.

        Returns
        -------
        dict[str, Any]
            Error class name, message, exit code and context fields.
        """
        record: dict[str, Any] = {
            "error": type(self).__name__,
            "message": self.message,
            "exit_code": self.exit_code,
        }
        record.update({key: _plain(value) for key, value in self.context.items()})
        return record


class DataError(SaeIpwError):
    """User or data problem (exit code 1)."""

    exit_code = 1


class NumericalError(SaeIpwError):
    """Numerical failure (exit code 2)."""

    exit_code = 2


class SchemaError(DataError):
    """A declared column is absent from the input file."""

    def __init__(self, column: str) -> None:
        super().__init__(MISSING_COLUMN.format(column=column), column=column)
        self.column = column


class ParseError(DataError):
    """A cell could not be parsed; `row` is the 1-based data row."""

    def __init__(self, message: str, row: int, column: str, value: str) -> None:
        super().__init__(message, row=row, column=column, value=value)
        self.row = row
        self.column = column


class FrameValidationError(DataError):
    """The population frame violates a structural invariant."""


class BoundsError(DataError):
    """A requested size or index is outside its admissible range."""


class ContractError(DataError):
    """A caller broke a documented precondition."""


class DomainError(DataError):
    """An argument is outside the mathematical domain of a function."""


class ConfigError(DataError):
    """The run configuration is invalid or inconsistent."""


class RankError(NumericalError):
    """A design or information matrix is singular."""


class ConvergenceError(NumericalError):
    """
    An iterative fit stopped without converging.

    Parameters
    ----------
    message : str
        Description of the failed fit.
    best : Any, optional
        Best iterate found before giving up.
    """

    def __init__(self, message: str, best: Any = None, **context: Any) -> None:
        super().__init__(message, **context)
        self.best = best


class SeparationError(NumericalError):
    """Complete or quasi-complete separation in a binary model."""

    def __init__(
        self, where: str, area: str | None = None, direction: Any = None
    ) -> None:
        super().__init__(SEPARATION.format(where=where), area=area)
        self.area = area
        self.direction = direction


class DegenerateSandwichError(NumericalError):
    """The robust sandwich has a zero denominator."""


class BootstrapError(NumericalError):
    """Too many bootstrap replications failed."""

    def __init__(self, failed: int, total: int) -> None:
        super().__init__(
            TOO_MANY_FAILURES.format(failed=failed, total=total),
            failed=failed,
            total=total,
        )


class MissingDecompositionError(NumericalError):
    """Benchmarking needs the per-area treated/control terms."""


class StageError(SaeIpwError):
    """
    A toolkit error tagged with the pipeline stage that raised it.

    The exit code is inherited from the wrapped error.
    """

    def __init__(self, stage: str, cause: SaeIpwError) -> None:
        super().__init__(f"{stage}: {cause.message}", stage=stage, **cause.context)
        self.stage = stage
        self.cause = cause
        self.exit_code = cause.exit_code

    def to_record(self) -> dict[str, Any]:
        """Build the error record, naming the wrapped error class."""
        record = super().to_record()
        record["error"] = type(self.cause).__name__
        return record


def _plain(value: Any) -> Any:
    """Reduce numpy scalars and other objects to JSON-friendly values."""
    if value is None or isinstance(value, (str, int, float, bool)):
        return value
    if hasattr(value, "item"):
        try:
            return value.item()
        except (TypeError, ValueError):
            pass
    return str(value)


@contextmanager
def pipeline_stage(stage: str) -> Iterator[None]:
    """
    Tag toolkit errors raised inside the block with a pipeline stage.

    Example
    -------
    >>> with pipeline_stage("outcome"):
    ...     fit = fit_reml(sample)  # doctest: +SKIP
    """
    try:
        yield
    except StageError:
        raise
    except SaeIpwError as exc:
        raise StageError(stage, exc) from exc
