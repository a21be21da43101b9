"""Exception types shared across the package."""


class GraphshiftError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(GraphshiftError):
    """Operands have incompatible shapes."""


class ConfigError(GraphshiftError):
    """A configuration value is missing, malformed, or out of range.

    ``path`` names the offending key (dotted, e.g. ``"backbone.kind"``) so
    CLI error messages can point at the exact field.
    """

    def __init__(self, message, path=None):
        self.path = path
        if path is not None:
            message = f"{path}: {message}"
        super().__init__(message)


class ContractError(GraphshiftError):
    """A caller violated a documented precondition."""


class MetricUndefinedError(GraphshiftError):
    """A metric is mathematically undefined for the given input."""


class TrainingDivergedError(GraphshiftError):
    """Training produced a non-finite loss and was aborted."""
