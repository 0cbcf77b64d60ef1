"""Exception types shared across the package."""


class R2RocError(Exception):
    """Base class for package-specific failures."""


class ConvergenceError(R2RocError):
    """An iterative solver failed to reach its tolerance.

    Carries enough context (final residual norm, iteration count, and for
    time marching the failing level) to diagnose the run.
    """

    def __init__(self, message, residual=None, iterations=None, level=None):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations
        self.level = level


class DegenerateBasisError(R2RocError):
    """A candidate basis vector is (numerically) dependent on the current one.

    Raised when a residualized snapshot or residual vector falls below the
    drop tolerance, or when an operator image is identically zero.
    """


class ConfigError(R2RocError):
    """An experiment configuration is malformed or inconsistent."""
