"""Exception hierarchy shared across the package."""


class SQSwinError(Exception):
    pass


class ShapeError(SQSwinError, ValueError):
    pass


class ConfigError(SQSwinError, ValueError):
    pass


class ContractError(SQSwinError, ValueError):
    pass


class IngestionError(SQSwinError):
    pass


class ValidationError(SQSwinError, ValueError):
    pass


class UndefinedCorrelationError(SQSwinError, ValueError):
    """Raised when a correlation is requested for a zero-variance vector."""


class NonFiniteError(SQSwinError, FloatingPointError):
    """A forward op produced NaN/Inf from finite inputs."""

    def __init__(self, op, message=None):
        self.op = op
        super().__init__(message or f"non-finite output produced by op '{op}'")
