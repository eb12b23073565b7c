"""Exception hierarchy.

Every error raised by the library derives from :class:`DpmeshError` and from one
of three categories the CLI maps to exit codes: input problems (3), numerical
failures (4) and memory-budget violations (5).
"""


class DpmeshError(Exception):
    """Base class for all library errors."""


class InputError(DpmeshError, ValueError):
    pass


class NumericError(DpmeshError, ArithmeticError):
    pass


class OutOfMemory(DpmeshError, MemoryError):
    """A dense object would exceed the configured memory budget."""


# matrixkit
class NotSymmetric(NumericError):
    pass


class NotPSD(NumericError):
    pass


class SvdNoConvergence(NumericError):
    pass


class RankDeficient(NumericError):
    pass


class ShapeMismatch(InputError):
    pass


# graphs
class ConnectivityRetriesExhausted(NumericError):
    pass


class ParseError(InputError):
    def __init__(self, line_no, message="could not parse line"):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


class EmptyGraph(InputError):
    pass


class Disconnected(InputError):
    pass


# workloads / trust
class MissingAveragingMatrix(InputError):
    pass


class EmptyAttackerSet(InputError):
    pass


class UnsupportedCombination(InputError):
    pass


class FactorizationFailed(NumericError):
    pass


class NoExactFactorization(NumericError):
    pass


# accounting
class PhaseOutOfRange(InputError):
    pass


class TooLarge(InputError):
    pass


class NonPositive(InputError):
    pass


class AlphaOutOfRange(InputError):
    pass


# mafalda
class SingularC(NumericError):
    pass


class Diverged(NumericError):
    pass


# simulator
class MissingColumn(InputError):
    pass


class NonNumeric(InputError):
    pass


class TooManyNodes(InputError):
    pass
