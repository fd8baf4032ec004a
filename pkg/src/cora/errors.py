"""Exception hierarchy shared across the package."""


class CoraError(Exception):
    """Base class for all package errors."""


class ShapeError(CoraError):
    """Tensor shapes or orders do not compose."""


class GeometryError(CoraError):
    """Convolution/pooling geometry is infeasible (kernel larger than input etc.)."""


class NumericError(CoraError):
    """Non-finite values or failed numeric routines."""


class FormatError(CoraError):
    """File format violation. Carries a short machine-readable code."""

    def __init__(self, code, message):
        super().__init__(message)
        self.code = code


class UsageError(CoraError):
    """Bad CLI arguments."""
