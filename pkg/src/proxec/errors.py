"""Exception hierarchy shared across the package."""


class ProxecError(Exception):
    """Base class for all package errors."""


class DataError(ProxecError):
    """Input data violates a schema or a precondition."""

    def __init__(self, message, details=None):
        super().__init__(message)
        self.details = dict(details or {})


class SchemaError(DataError):
    """A mapped column is missing or the schema is inconsistent."""


class EstimationError(ProxecError):
    """A model or estimating-equation solve failed."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = dict(diagnostics or {})


class DegenerateFitError(EstimationError):
    """No information to fit (for example zero events)."""


class SingularDesignError(EstimationError):
    """Design or Jacobian is rank deficient."""


class ConvergenceError(EstimationError):
    """Iteration limit reached, or the iterates diverge toward infinity."""


class WeakProxyError(SingularDesignError):
    """Bridge system is near-singular; the negative controls carry too little
    information about each other. Run ``proxy_strength`` to check."""


class InvalidEstimateError(EstimationError):
    """A probability estimate lies outside (0, 1)."""


class BootstrapUnstableError(EstimationError):
    """More than half of the bootstrap replicates failed."""
