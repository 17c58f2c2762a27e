class ConfigurationError(ValueError):
    """Shapes, dimensions or settings that do not fit together."""


class NumericError(ArithmeticError):
    """A non-finite value appeared, or a factorization broke down."""
