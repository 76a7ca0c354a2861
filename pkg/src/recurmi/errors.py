"""Exception hierarchy shared across the package.

The CLI maps these onto process exit codes: configuration problems exit 2,
data problems exit 3, numeric/convergence failures exit 4.
"""


class RecurMIError(Exception):
    """Base class for all package-specific errors."""


class DomainError(RecurMIError, ValueError):
    """An argument is outside the mathematical domain of an operation."""


class ConfigError(RecurMIError, ValueError):
    """A scenario configuration is invalid or cannot be parsed."""


class DataError(RecurMIError, ValueError):
    """Input data violate a structural requirement (e.g. no events at all)."""


class SchemaError(DataError):
    """An external file does not match its documented column schema."""


class FitError(RecurMIError, RuntimeError):
    """Base class for estimation failures."""


class ConvergenceError(FitError):
    """An iterative fit did not converge within its iteration budget."""

    def __init__(self, message, last_params=None, grad_norm=None):
        super().__init__(message)
        self.last_params = last_params
        self.grad_norm = grad_norm


class DivergenceError(FitError):
    """A coefficient ran away (monotone likelihood)."""


class DegenerateFitError(FitError):
    """The data carry no information for the requested fit (e.g. all-zero counts)."""


class SingularError(FitError):
    """The design matrix is rank deficient."""


class NumericError(RecurMIError, RuntimeError):
    """A numerical precondition failed (e.g. covariance not positive semidefinite)."""


class PoolingError(RecurMIError, RuntimeError):
    """Rubin pooling received unusable per-imputation fits."""

    def __init__(self, message, failed_indices=()):
        super().__init__(message)
        self.failed_indices = tuple(failed_indices)
