"""Exception types shared across the package."""


class GenoseqError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(GenoseqError):
    """Matrix dimensions are invalid or incompatible."""


class ConfigError(GenoseqError):
    """A configuration value is out of its legal range."""


class ParseError(GenoseqError):
    """An input file is malformed. Carries the offending location when known."""

    def __init__(self, message, row=None, col=None):
        loc = ""
        if row is not None:
            loc = f" (row {row}" + (f", column {col})" if col is not None else ")")
        super().__init__(message + loc)
        self.row = row
        self.col = col


class DataError(GenoseqError):
    """A dataset violates a precondition (e.g. no observed entries)."""


class StateError(GenoseqError):
    """An operation was called on data in the wrong state (e.g. holes remain)."""


class InputError(GenoseqError):
    """A runtime argument is unusable (empty sequence, too-short vector)."""


class DivergenceError(GenoseqError):
    """Optimization produced non-finite values. ``epoch`` is set when known."""

    def __init__(self, message, epoch=None):
        if epoch is not None:
            message = f"{message} (epoch {epoch})"
        super().__init__(message)
        self.epoch = epoch
