"""Exception hierarchy shared by every module."""


class PermFilterError(Exception):
    """Base class for all errors raised by this package."""


class InvalidInputError(PermFilterError, ValueError):
    pass


class InvalidConfigError(PermFilterError, ValueError):
    pass


class ContractError(PermFilterError, ValueError):
    """An operation was called on an object that violates its precondition."""


class DegenerateEnsembleError(PermFilterError, ArithmeticError):
    """No particle carries finite weight / likelihood."""


class NumericalFailureError(PermFilterError, ArithmeticError):
    """A loss or gradient evaluated to NaN or infinity.

    ``particle`` is the offending particle index when known.
    """

    def __init__(self, message, particle=None):
        super().__init__(message)
        self.particle = particle


class FormatError(PermFilterError, ValueError):
    """A binary or text file does not follow its declared layout."""


class UnsupportedError(PermFilterError, NotImplementedError):
    pass
