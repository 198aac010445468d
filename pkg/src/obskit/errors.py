"""Exception types shared across the package.

ValidationError covers bad inputs (malformed files, impossible parameter
combinations); NumericError covers failures of the numerics themselves.
The CLI maps them to exit codes 2 and 3 respectively.
"""


class ValidationError(ValueError):
    """Input data or parameters violate a documented precondition."""


class NumericError(RuntimeError):
    """A numeric routine failed (non-convergence, degenerate system)."""
