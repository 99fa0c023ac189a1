"""Exception taxonomy shared across the toolkit.

Every error the library raises deliberately derives from ``ToolkitError`` so
callers (and the command line driver) can map failures to exit codes without
string matching.
"""


class ToolkitError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(ToolkitError, ValueError):
    """Array shapes are inconsistent with the declared dimensions."""


class RangeError(ToolkitError, ValueError):
    """A scheduling-parameter value lies outside the model grid (no extrapolation)."""


class RankError(ToolkitError, ValueError):
    """A requested truncation order exceeds the numerical rank of the data.

    Attributes
    ----------
    index : int
        First singular-value index (0-based) that falls below the rank
        tolerance.
    """

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class TrimNotSettledError(ToolkitError, RuntimeError):
    """Settling simulation did not reach equilibrium within the step budget.

    Attributes
    ----------
    residual : float
        Norm of the last per-step state increment.
    """

    def __init__(self, message, residual):
        super().__init__(message)
        self.residual = residual


class GramianError(ToolkitError, RuntimeError):
    """A Gramian could not be factorized even after the PSD clamp."""


class ProjectionError(ToolkitError, RuntimeError):
    """Test-space construction failed (rank-deficient triangular factor).

    Attributes
    ----------
    grid_index : int or None
        Grid point at which the failure occurred.
    """

    def __init__(self, message, grid_index=None):
        super().__init__(message)
        self.grid_index = grid_index


class ConvergenceError(ToolkitError, RuntimeError):
    """An iterative solver exhausted its iteration cap.

    Attributes
    ----------
    residual : float
        Stationarity (KKT) residual at the last iterate.
    """

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class NumericalError(ToolkitError, RuntimeError):
    """A numerical precondition failed (e.g. an indefinite Gramian)."""


class ConstructionError(ToolkitError, RuntimeError):
    """Benchmark plant construction could not produce a stable system."""


class ConfigError(ToolkitError, ValueError):
    """An experiment configuration file is invalid."""


class MissingPrerequisiteError(ToolkitError, RuntimeError):
    """A pipeline stage was invoked before the stage that produces its inputs."""
