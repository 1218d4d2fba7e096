"""Exception hierarchy shared by the library and the command-line front end."""

from typing import Any, Optional


class EVChargingError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(EVChargingError, ValueError):
    """Invalid parameters or run configuration."""


class DataError(EVChargingError, ValueError):
    """Malformed or inconsistent input data.

    Args:
        message: Human readable description.
        line: 1-based line number in the source document, when known.
    """

    def __init__(self, message: str, line: Optional[int] = None) -> None:
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class NumericalError(EVChargingError, RuntimeError):
    """An estimation or optimization step failed to produce a usable result.

    Args:
        message: Human readable description.
        best: The best partial result found before giving up, if any.
    """

    def __init__(self, message: str, best: Optional[Any] = None) -> None:
        super().__init__(message)
        self.best = best
