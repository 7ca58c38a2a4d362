"""Carleman-weighted estimate verification and inverse coefficient recovery
for the linearized incompressible MHD system on the unit box."""

from .errors import CarlemanMhdError, ConfigError, NumericalError, PreconditionError

__version__ = "0.1.0"

__all__ = [
    "CarlemanMhdError",
    "ConfigError",
    "NumericalError",
    "PreconditionError",
    "__version__",
]
