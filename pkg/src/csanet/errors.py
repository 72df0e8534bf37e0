"""Exception types shared across the package."""


class CSANetError(Exception):
    """Base class for all package errors."""


class DimensionError(CSANetError, ValueError):
    pass


class ConfigurationError(CSANetError, ValueError):
    pass


class ContractError(CSANetError, RuntimeError):
    pass


class NumericError(CSANetError, ArithmeticError):
    pass


class InputError(CSANetError, ValueError):
    pass


class FormatError(CSANetError, ValueError):
    """Malformed binary file. ``offset`` is the byte position of the problem."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset
