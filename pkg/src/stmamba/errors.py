"""Exception taxonomy shared across the package.

The CLI maps these onto exit codes: ConfigError and ShapeError are
validation failures (exit 1), NumericError and subclasses are numeric
failures (exit 2), DataError is an I/O failure (exit 3).
"""


class StMambaError(Exception):
    """Base class for all package errors."""


class ShapeError(StMambaError, ValueError):
    """Operands have incompatible shapes; message names both shapes."""


class ConfigError(StMambaError, ValueError):
    """Invalid configuration key, type, or constraint; message names the key."""


class NumericError(StMambaError, ArithmeticError):
    """Non-finite values or numerically invalid operation."""


class StabilityError(NumericError):
    """Discretization would blow up (positive delta * A product)."""


class DataError(StMambaError, OSError):
    """Dataset file missing, malformed, or inconsistent with its header."""


class InsufficientDataError(DataError):
    """A split or segment is too short for the requested windows."""


class DegenerateFeatureError(DataError):
    """A feature has zero variance and cannot be standardized."""
