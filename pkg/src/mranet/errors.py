"""Exception types shared across the package.

The CLI maps these onto exit codes (see cli.py): configuration problems,
resource-budget refusals, and verification failures each get a distinct
code so scripted callers can react without parsing stderr.
"""


class MranetError(Exception):
    """Base class for all package-specific errors."""


class ConfigError(MranetError):
    """Bad or unknown configuration input (file keys, flag values)."""


class SymmetryError(MranetError):
    """An input violated a required symmetry beyond tolerance."""


class BudgetError(MranetError):
    """A precomputation or allocation would exceed the configured budget."""


class ConvergenceError(MranetError):
    """An iterative solver failed to meet its residual bound."""

    def __init__(self, message: str, iterations: int | None = None):
        if iterations is not None:
            message = f"{message} (after {iterations} iterations)"
        super().__init__(message)
        self.iterations = iterations


class VerificationError(MranetError):
    """A structural self-check (trace diagnostics, invariants) failed."""
