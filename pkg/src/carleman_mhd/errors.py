"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: ConfigError -> 1, PreconditionError -> 2,
NumericalError -> 3.
"""


class CarlemanMhdError(Exception):
    """Base class for all package errors."""


class ConfigError(CarlemanMhdError):
    """Malformed or inconsistent experiment configuration."""


class PreconditionError(CarlemanMhdError):
    """An operation was called outside its stated domain of validity."""


class NumericalError(CarlemanMhdError):
    """A numerical procedure failed (non-convergence, failed assumption check)."""
