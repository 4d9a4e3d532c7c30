"""Exception hierarchy shared across the solver modules."""


class MfgError(Exception):
    """Base class for all solver errors."""


class GridError(MfgError):
    """Invalid grid construction, mismatched grids, or bad samples."""


class ConfigError(MfgError):
    """Malformed or inconsistent experiment configuration."""


class LinearSolveError(MfgError):
    """A linear system could not be solved to the requested residual."""

    def __init__(self, message, achieved=None):
        super().__init__(message)
        self.achieved = achieved


class InnerIterationDiverged(MfgError):
    """The inner Newton loop of the HJB marcher exceeded its iteration cap."""

    def __init__(self, step, last_change, cap):
        super().__init__(
            f"inner iteration cap {cap} exceeded at time step {step} "
            f"(last relative change {last_change:.3e})"
        )
        self.step = step
        self.last_change = last_change


class SweepAborted(MfgError):
    """The alternating sweep hit non-finite iterates or a marching failure."""

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


class MultiscaleError(MfgError):
    """A level of the multiscale chain failed to produce a converged solution."""

    def __init__(self, level, message):
        super().__init__(f"level {level}: {message}")
        self.level = level


class NewtonError(MfgError):
    """The coupled Newton solver failed (singular Jacobian or no progress)."""


class AnalysisError(MfgError):
    """A diagnostic routine was used outside its supported regime."""
