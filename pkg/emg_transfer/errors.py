"""Exception taxonomy shared by the services and the CLI."""

from __future__ import annotations

from typing import Optional

from pydantic import ValidationError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


class EmgTransferError(Exception):
    """Base class for every error raised on purpose by this package."""

    exit_code = 1


class ConfigurationError(EmgTransferError, ValueError):
    """Raised when an experiment or operation is configured inconsistently."""

    exit_code = EXIT_CONFIG


class DataError(EmgTransferError, ValueError):
    """Raised when input data cannot be used."""

    exit_code = EXIT_DATA


class SchemaError(DataError):
    """A required column is missing or the column layout is wrong."""


class ParseError(DataError):
    """A data file is malformed."""

    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class DomainError(EmgTransferError, ValueError):
    """Raised when arguments fall outside an operation's domain."""

    exit_code = EXIT_DATA


class NumericError(EmgTransferError, ArithmeticError):
    """A linear system could not be solved reliably."""

    exit_code = EXIT_NUMERIC

    def __init__(self, message: str, condition: Optional[float] = None):
        self.condition = condition
        if condition is not None:
            message = f"{message} (condition estimate {condition:.3e})"
        super().__init__(message)


def exit_code_for(exc: BaseException) -> int:
    """Map an exception to the CLI exit status."""
    if isinstance(exc, EmgTransferError):
        return exc.exit_code
    if isinstance(exc, ValidationError):
        return EXIT_CONFIG
    return 1


def error_report(exc: BaseException) -> dict:
    """Machine-readable description of a failure."""
    report = {
        "type": type(exc).__name__,
        "message": str(exc),
        "exit_code": exit_code_for(exc),
    }
    line = getattr(exc, "line", None)
    if line is not None:
        report["line"] = line
    condition = getattr(exc, "condition", None)
    if condition is not None:
        report["condition"] = condition
    return report
