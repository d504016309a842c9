"""Exception types shared across the package."""


class AnomographyError(Exception):
    """Base class for package errors."""


class NumericalError(AnomographyError, RuntimeError):
    """An iterative routine failed to converge or produced non-finite values."""


class InconsistentObservationError(AnomographyError, ValueError):
    """Rates assign zero mass to a row, column or flow with nonzero observed traffic."""


class IngestError(AnomographyError, ValueError):
    """Malformed input record; carries the offending line number."""

    def __init__(self, message, *, path=None, line=None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where = f"{path}:"
        if line is not None:
            where += f"{line}:"
        super().__init__(f"{where} {message}" if where else message)
