"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class TrajodeError(Exception):
    exit_code = 1


class ConfigurationError(TrajodeError, ValueError):
    exit_code = 2


class DimensionError(TrajodeError, ValueError):
    exit_code = 3


class DataError(TrajodeError, ValueError):
    exit_code = 3


class ParseError(DataError):
    """Malformed binary file. ``offset`` is the byte position of the problem."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class UnsupportedVersionError(ParseError):
    pass


class NumericError(TrajodeError, ArithmeticError):
    exit_code = 4


class DivergenceError(NumericError):
    pass


class ConsistencyError(TrajodeError, RuntimeError):
    exit_code = 4


class SingularityError(NumericError):
    pass


class FactorizationError(NumericError):
    pass


class EmptyClusterError(NumericError):
    def __init__(self, component, mass):
        super().__init__(f"component {component} is empty (N_k={mass:.3g})")
        self.component = component


class UndefinedMetricError(TrajodeError, ValueError):
    exit_code = 5
