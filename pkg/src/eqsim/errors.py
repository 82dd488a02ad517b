"""Exception types shared across the package."""


class EqsimError(Exception):
    """Base class for all package errors."""


class MeshParseError(EqsimError):
    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class EmptyMeshError(EqsimError):
    pass


class GeometryError(EqsimError):
    pass


class ConfigError(EqsimError):
    pass


class NumericalBreakdownError(EqsimError):
    pass


class StepFailure(EqsimError):
    """A time step could not be completed (solver or Newton failure)."""
