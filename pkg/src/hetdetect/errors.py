"""Exception hierarchy.

Every error raised by the library derives from :class:`HetDetectError`.
The three intermediate classes map onto CLI exit codes: configuration
problems exit with 2, bad input data with 3, numerical failures with 4.
"""

from __future__ import annotations


class HetDetectError(Exception):
    """Base class for all library errors."""

    exit_code = 1

    def with_context(self, context: str) -> "HetDetectError":
        """Return a copy of this error with ``context`` prefixed to the message."""
        new = type(self)(f"{context}: {self}")
        new.__cause__ = self
        return new


class ConfigError(HetDetectError):
    exit_code = 2


class DataError(HetDetectError):
    exit_code = 3


class NumericalError(HetDetectError):
    exit_code = 4


# -- data errors -------------------------------------------------------------


class NonFiniteInput(DataError):
    pass


class NonBinaryResponse(DataError):
    pass


class KTooSmall(DataError):
    pass


class SplitTooSmall(DataError):
    pass


class MissingFit(DataError):
    pass


class SchemaMismatch(DataError):
    pass


class NonNumericCell(DataError):
    pass


class EmptyBlock(DataError):
    pass


class BlockFileNotFound(DataError, FileNotFoundError):
    pass


# -- numerical errors --------------------------------------------------------


class NonConvergence(NumericalError):
    pass


class RankDeficientDesign(NumericalError):
    pass


class SingularHessian(NumericalError):
    pass


class NonPositiveVariance(NumericalError):
    pass


# -- domain errors -----------------------------------------------------------


class DomainError(ConfigError, ValueError):
    """An argument lies outside the mathematical domain of a function."""
