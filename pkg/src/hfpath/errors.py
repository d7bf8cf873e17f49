"""Exception types shared across the package."""


class ArgumentError(ValueError):
    """Invalid argument (bad grid, index out of range, non-positive exponent, ...)."""


class ConfigurationError(ValueError):
    """An experiment or CLI configuration cannot be honoured."""

    def __init__(self, message, key=None):
        super().__init__(message)
        self.key = key


class MisuseError(ValueError):
    """A statistic was applied outside the setting where its limit theory holds."""


class UnsupportedError(ValueError):
    """The requested method or parameter range is not supported."""


class UnsupportedDerivativeError(UnsupportedError):
    """No directional derivative is available for the functional.

    ``partial`` may carry whatever could still be computed (e.g. the first
    of the three CLT constants, which needs no derivative).
    """

    def __init__(self, message, partial=None):
        super().__init__(message)
        self.partial = partial


class IntegrationDivergedError(RuntimeError):
    """A simulated state became non-finite."""

    def __init__(self, fine_index, what="x"):
        super().__init__(f"non-finite {what} at fine index {fine_index}")
        self.fine_index = fine_index


class DegenerateVarianceError(ArithmeticError):
    """A variance estimate used for studentization is not strictly positive."""


class InternalConstantError(RuntimeError):
    """A derived constant is inconsistent (e.g. a negative variance)."""
