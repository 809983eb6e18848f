"""Exception hierarchy.

The CLI maps ``DataError`` to exit code 2 and ``NumericError`` to exit code 3.
"""


class CerError(Exception):
    pass


class DataError(CerError, ValueError):
    pass


class NumericError(CerError, ArithmeticError):
    pass


class UnknownLabel(DataError):
    pass


class InvalidDistribution(NumericError, ValueError):
    pass


class LabelOutOfRange(DataError):
    pass


class ShapeMismatch(DataError):
    pass
