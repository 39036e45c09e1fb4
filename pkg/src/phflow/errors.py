"""Exception types shared across the toolkit."""


class ToolkitError(Exception):
    """Base class for all toolkit-specific failures."""


class DimensionMismatch(ToolkitError, ValueError):
    """Array shapes do not line up with the declared spaces."""


class InvalidParameter(ToolkitError, ValueError):
    """A scalar or structural parameter is outside its admissible range."""


class NonConvergence(ToolkitError, RuntimeError):
    """An iterative solver exhausted its budget.

    Carries the final residual so callers can judge how close the
    iteration got before giving up.
    """

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class SingularStep(ToolkitError, RuntimeError):
    """A one-step implicit solve hit a singular matrix (step too large)."""


class StepRejected(ToolkitError, RuntimeError):
    """An explicit integrator step failed its residual audit."""


class AccretivityViolation(ToolkitError, RuntimeError):
    """A probe found a negative monotonicity gap where none is allowed."""


class EigenFailure(ToolkitError, RuntimeError):
    """A dense eigensolve did not converge."""


class NotHurwitz(ToolkitError, RuntimeError):
    """A generator matrix has spectrum touching the closed right half plane."""


class InsufficientData(ToolkitError, ValueError):
    """A fit was requested on too few or degenerate samples."""


class ConfigError(ToolkitError, ValueError):
    """Scenario configuration failed validation; names the offending field."""

    def __init__(self, message, field=None):
        if field:
            message = f"{field}: {message}"
        super().__init__(message)
        self.field = field


class FormatError(ToolkitError, ValueError):
    """A CSV or report file does not have the expected layout."""
