"""Exception types shared across the package.

The CLI maps these onto process exit codes: data problems exit 3,
numerical divergence / instability exit 4, everything else 1.
"""


class FlexError(Exception):
    """Base class for all package errors."""


class ScheduleDomainError(FlexError, ValueError):
    """Diffusion time outside the valid (clamped) domain."""


class ShapeError(FlexError, ValueError):
    """Tensor/grid shape mismatch or indivisible spatial size."""


class OrderingError(FlexError, ValueError):
    """Reverse-time step ordering violated (t_to >= t_from)."""


class ConfigError(FlexError, ValueError):
    """Invalid model/run configuration."""


class ContextError(FlexError, ValueError):
    """Conditioning context malformed for the requested task."""


class ParameterError(FlexError, ValueError):
    """Invalid operation parameter (factor, std, member count, ...)."""


class ConsistencyError(FlexError, ValueError):
    """Inputs violate a cross-field consistency requirement."""


class CoverageError(FlexError, ValueError):
    """Patch set does not cover the output domain."""


class DataError(FlexError, ValueError):
    """Dataset missing, malformed, or too small."""


class CheckpointError(FlexError, ValueError):
    """Checkpoint file malformed or config mismatch on load."""


class DivergenceError(FlexError, RuntimeError):
    """Training loss became non-finite."""

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message)
        self.step = step


class InstabilityError(FlexError, RuntimeError):
    """Simulator state became non-finite."""

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message)
        self.step = step


class IterationError(FlexError, RuntimeError):
    """Iterative estimator failed to converge within its cap."""
