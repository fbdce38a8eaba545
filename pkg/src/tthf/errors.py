"""Exception hierarchy shared by every tthf module."""


class TthfError(Exception):
    """Base class for all errors raised by tthf."""


# topology
class DisconnectedGraph(TthfError, ValueError):
    pass


class NoConvergence(TthfError, ArithmeticError):
    pass


class ToleranceNotMet(TthfError):
    """Raised when radius tuning cannot hit the spectral target.

    The closest achieved ``(graph, matrix)`` pair is attached as ``best`` so
    the caller may accept it explicitly.
    """

    def __init__(self, message, best=None):
        super().__init__(message)
        self.best = best


class DimensionMismatch(TthfError, ValueError):
    pass


# data
class InvalidShape(TthfError, ValueError):
    pass


class InsufficientData(TthfError, ValueError):
    pass


class IdxFormatError(TthfError, ValueError):
    """Malformed IDX file. ``path`` names the offending file."""

    def __init__(self, message, path):
        super().__init__(f"{path}: {message}")
        self.path = path


class BadMagic(IdxFormatError):
    pass


class CountMismatch(IdxFormatError):
    pass


class TruncatedFile(IdxFormatError):
    pass


# model
class EmptyShard(TthfError, ValueError):
    pass


class BatchTooLarge(TthfError, ValueError):
    pass


# engine
class InvalidLambda(TthfError, ValueError):
    pass


class ConfigError(TthfError, ValueError):
    pass


# analysis
class HypothesisViolated(TthfError, ValueError):
    pass


class UnknownOptimum(TthfError, ValueError):
    pass


# cli
class ParseError(TthfError, ValueError):
    pass


class ValidationError(TthfError, ValueError):
    def __init__(self, key, message):
        super().__init__(f"{key}: {message}")
        self.key = key


class IncompatibleRuns(TthfError, ValueError):
    pass
