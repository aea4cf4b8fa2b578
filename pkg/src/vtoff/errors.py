"""Exception types shared across the package."""


class VtoffError(Exception):
    """Base class for all package-specific errors."""


class ShapeError(VtoffError, ValueError):
    """Tensor extents are inconsistent with an operation's contract."""


class NumericsError(VtoffError, ArithmeticError):
    """A kernel produced NaN or Inf values."""


class ConfigError(VtoffError, ValueError):
    """A configuration value or combination is invalid."""


class ValidationError(VtoffError, ValueError):
    """User-supplied data violates a documented precondition."""


class CheckpointError(VtoffError, RuntimeError):
    """A checkpoint file is missing, corrupt, or incompatible."""


class DatasetError(VtoffError, RuntimeError):
    """A dataset file is missing or corrupt."""
