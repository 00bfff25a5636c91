"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ConfigError(ValueError):
    """Invalid configuration or hyperparameter value."""


class NumericError(ArithmeticError):
    """A non-finite value appeared where finite values are required."""


class FormatError(ValueError):
    """A binary file does not follow the expected layout.

    ``offset`` is the byte position at which parsing failed.
    """

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset
