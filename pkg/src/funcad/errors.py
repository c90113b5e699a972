"""Exception hierarchy shared by every stage."""


class FuncadError(Exception):
    """Base class for all errors raised by funcad."""


class ArgumentError(FuncadError, ValueError):
    """An argument violates a documented precondition."""


class SchemaError(FuncadError, ValueError):
    """Columns, feature names or file layout do not match what was expected."""


class StructuralError(FuncadError, ValueError):
    """Input data has the wrong shape (ragged series, duplicated time stamps)."""


class ValidationError(FuncadError, ValueError):
    """Input data contains values that are not allowed (NaN, inf)."""


class NumericError(FuncadError, ArithmeticError):
    """A numerical procedure could not be carried out (singular design...)."""


class CapacityError(FuncadError, RuntimeError):
    """A computation would exceed a configured size cap."""


class DependencyError(FuncadError, FileNotFoundError):
    """A required upstream artifact is missing."""


class LockError(FuncadError, RuntimeError):
    """Another pipeline run holds the output directory."""


class StageError(FuncadError):
    """A pipeline stage failed; wraps the original error."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"[{stage}] {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause
