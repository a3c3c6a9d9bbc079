"""Exception types shared across the package."""


class ComergeError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(ComergeError, ValueError):
    """Operand shapes or layouts are inconsistent with the operation."""


class DomainError(ComergeError, ValueError):
    """Input values lie outside the operation's domain."""


class ParameterError(ComergeError, ValueError):
    """A configuration parameter is out of range."""


class DegenerateGeometryError(ComergeError, ValueError):
    """Geometric input does not determine a unique solution."""


class TrainingDivergedError(ComergeError, RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, step: int, message: str | None = None):
        self.step = step
        super().__init__(message or f"loss became non-finite at step {step}")
