"""Exception and warning types raised across the package."""


class AppraisalError(Exception):
    """Base class for all package errors."""


class SchemaError(AppraisalError):
    """Malformed input header, schema document or configuration."""


class DataError(AppraisalError, ValueError):
    """Input values violate a documented precondition."""


class RankDeficiencyError(DataError):
    """Design matrix is not of full column rank."""

    def __init__(self, message, dependent_columns=()):
        super().__init__(message)
        self.dependent_columns = list(dependent_columns)


class SingularSystemError(AppraisalError):
    """A linear system could not be solved even after regularization."""


class StageError(AppraisalError):
    """A pipeline stage failed; carries the stage name."""

    def __init__(self, stage, message):
        super().__init__(f"stage '{stage}' failed: {message}")
        self.stage = stage


class DegenerateDataWarning(UserWarning):
    """Statistic could not be computed meaningfully; a fallback was used."""


class ConvergenceWarning(UserWarning):
    """Iterative solver stopped at its iteration cap."""
