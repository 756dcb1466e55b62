"""Error hierarchy and classification for hypergraph runs."""

import re
from dataclasses import dataclass
from enum import Enum, auto
from pathlib import Path
from typing import Optional


class HypergraphError(Exception):
    """Base class for every error raised by the hypergraph engine."""


class StructuralError(HypergraphError):
    """Dimension, channel-count or channel-order mismatch."""


class UndefinedMetricError(HypergraphError):
    """A metric has no defined value for the given inputs (e.g. no valid cell)."""


class UndefinedObjectiveError(UndefinedMetricError):
    """A fit has no valid target cell to learn from."""


class ParameterError(HypergraphError, ValueError):
    """Invalid argument or configuration value."""


class ConfigurationError(HypergraphError):
    """A pipeline precondition is not met (empty labeled set, missing pseudolabels)."""


class TrainingError(HypergraphError):
    """A fit failed for a reason other than an undefined objective."""


class FormatError(HypergraphError):
    """A persisted artifact could not be decoded."""

    def __init__(self, message: str, offset: Optional[int] = None, path: Optional[Path] = None):
        self.offset = offset
        self.path = path
        details = []
        if path is not None:
            details.append(f"file {path}")
        if offset is not None:
            details.append(f"byte offset {offset}")
        suffix = f" ({', '.join(details)})" if details else ""
        super().__init__(f"{message}{suffix}")


class DataError(HypergraphError):
    """A dataset or run artifact is missing or inconsistent."""

    def __init__(self, message: str, path: Optional[Path] = None):
        self.path = path
        super().__init__(f"{message}: {path}" if path is not None else message)


class ErrorType(Enum):
    """Run error categories, each mapped to a process exit code."""

    USAGE = auto()
    DATA = auto()
    TRAINING = auto()


EXIT_CODES: dict[ErrorType, int] = {
    ErrorType.USAGE: 1,
    ErrorType.DATA: 2,
    ErrorType.TRAINING: 3,
}


@dataclass
class RunError:
    """Structured run error information."""

    error_type: ErrorType
    message: str  # original exception message
    cause: str  # short explanation of the category
    solution: str  # what to try next
    exit_code: int
    original_exception: Optional[Exception] = None

    def one_line(self) -> str:
        """Single-line rendering for the command line."""
        message = " ".join(self.message.split())
        return f"error: {message} ({self.cause} {self.solution})"


ERROR_MESSAGES: dict[ErrorType, dict[str, str]] = {
    ErrorType.USAGE: {
        "cause": "Invalid arguments or configuration.",
        "solution": "Check the flags with --help.",
    },
    ErrorType.DATA: {
        "cause": "Dataset or run artifacts are missing or malformed.",
        "solution": "Regenerate the dataset or rerun with --force.",
    },
    ErrorType.TRAINING: {
        "cause": "A training phase failed.",
        "solution": "Inspect logs/run.log; completed phases are kept for resume.",
    },
}


class ErrorClassifier:
    """Classifies exceptions into structured RunError records."""

    DATA_PATTERNS = [
        r"no such file",
        r"not found",
        r"permission denied",
        r"truncated",
        r"magic",
    ]

    @classmethod
    def classify(cls, exception: BaseException) -> RunError:
        """
        Classify an exception into a RunError.

        Args:
            exception: The original exception

        Returns:
            RunError with category, exit code and user-facing hints
        """
        error_type = cls._determine_type(exception)
        info = ERROR_MESSAGES[error_type]
        message = str(exception) or type(exception).__name__
        return RunError(
            error_type=error_type,
            message=message,
            cause=info["cause"],
            solution=info["solution"],
            exit_code=EXIT_CODES[error_type],
            original_exception=exception if isinstance(exception, Exception) else None,
        )

    @classmethod
    def _determine_type(cls, exception: BaseException) -> ErrorType:
        """Determine the error category from the exception type, then its message."""
        if isinstance(exception, (ParameterError, ConfigurationError)):
            return ErrorType.USAGE

        if isinstance(exception, (DataError, FormatError, StructuralError)):
            return ErrorType.DATA

        if isinstance(exception, (TrainingError, UndefinedMetricError)):
            return ErrorType.TRAINING

        if isinstance(exception, (FileNotFoundError, PermissionError, IsADirectoryError)):
            return ErrorType.DATA

        if isinstance(exception, ValueError):
            return ErrorType.USAGE

        message = str(exception)
        for pattern in cls.DATA_PATTERNS:
            if re.search(pattern, message, re.IGNORECASE):
                return ErrorType.DATA

        return ErrorType.TRAINING
