"""Exception types shared across the package."""


class DrkError(Exception):
    """Base class for all errors raised by drk."""


class ShapeError(DrkError, ValueError):
    pass


class ValidationError(DrkError, ValueError):
    pass


class FormatError(DrkError, ValueError):
    pass


class NumericError(DrkError, ArithmeticError):
    """A computation produced a non-finite value."""

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class TrainingError(NumericError):
    pass


class GenerationError(DrkError, RuntimeError):
    pass
