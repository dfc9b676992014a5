"""Exception hierarchy shared across the package."""


class ShtoccError(Exception):
    """Base class for all package errors."""


class StructuralError(ShtoccError, ValueError):
    """Shapes, dimensions or channel counts do not line up."""


class BoundsError(ShtoccError, IndexError):
    """A coordinate falls outside the grid."""


class NumericError(ShtoccError, ArithmeticError):
    """Non-finite values where finite ones are required."""


class ConfigError(ShtoccError, ValueError):
    """Invalid or infeasible configuration value."""


class DataError(ShtoccError, ValueError):
    """Input data cannot support the requested computation."""
