"""Exception hierarchy shared by the package."""


class ITRError(Exception):
    """Base class for all package errors."""


class ConfigError(ITRError, ValueError):
    """Invalid configuration or usage; the CLI maps this to exit code 2."""


class SchemaError(ConfigError):
    """A required column is missing or the column-role mapping is inconsistent."""


class DataError(ITRError, ValueError):
    """Malformed or out-of-domain input data."""


class RankDeficientError(ITRError, ValueError):
    """Design or constraint matrix has linearly dependent columns."""

    def __init__(self, message, columns=()):
        super().__init__(message)
        self.columns = list(columns)


class SeparationError(ITRError, RuntimeError):
    """Logistic fit diverged, typically because of (quasi-)separation."""


class InfeasibleError(ITRError, RuntimeError):
    """Moment targets cannot be matched by positive weights on the source sample."""

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual
