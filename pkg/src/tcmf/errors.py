"""Exception types shared across the package."""


class TcmfError(Exception):
    """Base class for package errors."""


class InvalidArgument(TcmfError, ValueError):
    """Raised for malformed inputs (bad grids, negative parameters, ...)."""


class ExplosionError(TcmfError, FloatingPointError):
    """A forward or backward scheme produced a non-finite value."""

    def __init__(self, particle: int, step: int, what: str = "state"):
        self.particle = particle
        self.step = step
        super().__init__(f"non-finite {what} at particle {particle}, step {step}")


class RegressionError(TcmfError, ArithmeticError):
    """Least-squares projection stayed singular after the ridge fallback."""
