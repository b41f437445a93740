"""Exception types shared across the package.

Every error raised on purpose derives from :class:`Error`, so callers
(the CLI in particular) can distinguish expected failures from bugs.
"""


class Error(Exception):
    """Base class for all package errors."""


class InvalidArgumentError(Error, ValueError):
    """An argument violates a documented precondition."""


class DegenerateInputError(Error, ValueError):
    """Input is structurally valid but numerically unusable (e.g. a zero row)."""


class NoValidTripletsError(Error, ValueError):
    """A batch or dataset has fewer than two distinct labels."""


class NonFiniteGradientError(Error, ArithmeticError):
    """A gradient or loss stopped being finite during optimization."""


class UndefinedQueryError(Error, ValueError):
    """A retrieval metric is undefined for one or more queries."""

    def __init__(self, message: str, query_ids: tuple = ()):
        super().__init__(message)
        self.query_ids = tuple(query_ids)


class FormatError(Error, ValueError):
    """A binary or text file does not match its expected layout."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class CheckpointError(FormatError):
    """A checkpoint file is malformed or inconsistent with its model config."""
