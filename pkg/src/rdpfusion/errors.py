"""Exception hierarchy shared across the package."""


class RdpFusionError(Exception):
    """Base class for all package errors."""


class InvalidInputError(RdpFusionError, ValueError):
    pass


class BudgetOverrunError(RdpFusionError):
    """A charge would push cumulative leakage past the global budget.

    This is the safety property of the whole package; callers must abort
    the run rather than catch and continue.
    """


class NumericalError(RdpFusionError, ArithmeticError):
    pass


class UsageError(RdpFusionError, RuntimeError):
    pass


class ParseError(RdpFusionError, ValueError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class DataError(RdpFusionError, ValueError):
    pass


class EndOfEpisode(RdpFusionError):
    pass


class ImpossibleObservationError(RdpFusionError, ValueError):
    pass


class InfeasibleInstanceError(RdpFusionError, ValueError):
    pass


class UndefinedDivergenceError(RdpFusionError, ArithmeticError):
    pass


class ConfigError(RdpFusionError, ValueError):
    def __init__(self, path, message):
        super().__init__(f"{path}: {message}")
        self.path = path
