"""Exception types raised by torusmfg."""


class TorusMFGError(Exception):
    """Base class for all package errors."""


class GridError(TorusMFGError, ValueError):
    """Invalid grid, field shape or non-finite field values."""


class DegenerateDensityError(TorusMFGError, ValueError):
    """A density is not a strictly positive probability density."""


class KernelError(TorusMFGError, ValueError):
    """Malformed interaction kernel, or a kernel the grid cannot resolve."""


class ConvergenceError(TorusMFGError, RuntimeError):
    """An iterative solver stopped before reaching its tolerance.

    Attributes
    ----------
    residual : float
        Last residual seen by the solver.
    iterations : int
        Iterations performed.
    """

    def __init__(self, message, residual=float("nan"), iterations=0):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations


class BlowUpError(TorusMFGError, RuntimeError):
    """A time march produced values beyond the blow-up guard."""

    def __init__(self, message, step):
        super().__init__(message)
        self.step = step


class ConfigError(TorusMFGError, ValueError):
    """Invalid scenario configuration."""


class DensityFormatError(TorusMFGError, ValueError):
    """A density file could not be parsed; the message names the line."""
