"""Exception types shared across the package."""


class CellGplvmError(Exception):
    """Base class for all errors raised by this package."""


class DimensionMismatchError(CellGplvmError, ValueError):
    """Input shapes are inconsistent with each other or with a spec object."""


class NonFiniteError(CellGplvmError, FloatingPointError):
    """A computation produced (or received) NaN/inf; the message names the term."""


class IllConditionedMatrixError(CellGplvmError, ValueError):
    """Cholesky failed even at the largest jitter; the message names the matrix."""


class ConfigError(CellGplvmError, ValueError):
    """A configuration value violates a model constraint."""


class DataFormatError(CellGplvmError, ValueError):
    """An input file could not be parsed; carries a line number when known."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"{message} (line {line})"
        super().__init__(message)
        self.line = line


class BlockFormError(CellGplvmError, ValueError):
    """Inducing inputs are not in the two-block (nonlinear | linear) layout."""


class UnsupportedOperationError(CellGplvmError, RuntimeError):
    """The requested operation is not available for this model state."""
