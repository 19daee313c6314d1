"""Exception hierarchy shared by all hetfx modules."""


class HetfxError(Exception):
    """Base class for every error raised by hetfx."""


class SchemaError(HetfxError):
    """A column named in a schema or config is missing or malformed."""


class ValidationError(HetfxError, ValueError):
    """Input data violates a documented precondition."""


class SeparationError(HetfxError):
    """Logistic regression coefficients diverge (perfect or quasi separation)."""


class ConvergenceError(HetfxError):
    """An iterative solver hit its iteration cap.

    Parameters
    ----------
    message : str
        Human readable description.
    diagnostics : dict, optional
        Solver state at the time of failure (iterations, last change, ...).
    """

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = dict(diagnostics or {})


class CommonSupportError(HetfxError):
    """Trimming removed every treated or every control observation."""


class BootstrapError(HetfxError):
    """Too many bootstrap replications had to be excluded."""


class ManifestError(HetfxError):
    """A required upstream artifact is missing or stale."""
