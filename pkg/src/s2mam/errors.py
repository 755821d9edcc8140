"""Exception hierarchy shared by every module."""


class S2MAMError(Exception):
    """Base class for all package errors."""


class ValidationError(S2MAMError, ValueError):
    """Bad input: wrong shapes, out-of-range hyperparameters, missing labels."""


class ParseError(ValidationError):
    """A CSV cell could not be parsed."""

    def __init__(self, message, row=None, column=None):
        super().__init__(message)
        self.row = row
        self.column = column


class NumericalError(S2MAMError, ArithmeticError):
    """A solver produced non-finite values or hit a singular system."""


class DivergenceError(NumericalError):
    def __init__(self, message, rho=None, iteration=None):
        super().__init__(message)
        self.rho = rho
        self.iteration = iteration


class SingularSystemError(NumericalError):
    pass
