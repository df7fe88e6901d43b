"""Shared exception types."""


class ValidationError(ValueError):
    """Raised when inputs violate a documented precondition (bad file,
    infeasible geometry, malformed config).  The CLI maps this to exit 1;
    anything else that escapes is a runtime failure and maps to exit 2."""


class TrainingDiverged(RuntimeError):
    """Raised when a loss turns non-finite mid-run."""
