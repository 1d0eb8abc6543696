"""Diagnostics and exceptions shared by every pipeline stage."""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Optional, Tuple

Span = Tuple[int, int]


class Severity(str, enum.Enum):
    FATAL = "fatal"
    ERROR = "error"
    WARNING = "warning"
    INFO = "info"

    @property
    def blocking(self) -> bool:
        """True for severities that disqualify a document from error-free."""
        return self in (Severity.FATAL, Severity.ERROR)


@dataclass(frozen=True)
class Diagnostic:
    severity: Severity
    code: str
    message: str
    span: Optional[Span] = None

    def to_json(self) -> dict:
        return {
            "severity": self.severity.value,
            "code": self.code,
            "message": self.message,
            "span": list(self.span) if self.span is not None else None,
        }

    @classmethod
    def from_json(cls, data: dict) -> "Diagnostic":
        span = data.get("span")
        return cls(Severity(data["severity"]), data["code"], data["message"],
                   tuple(span) if span is not None else None)


def error(code: str, message: str, span: Optional[Span] = None) -> Diagnostic:
    return Diagnostic(Severity.ERROR, code, message, span)


def warning(code: str, message: str, span: Optional[Span] = None) -> Diagnostic:
    return Diagnostic(Severity.WARNING, code, message, span)


def info(code: str, message: str, span: Optional[Span] = None) -> Diagnostic:
    return Diagnostic(Severity.INFO, code, message, span)


class ConversionError(Exception):
    """Base class for conditions that stop a conversion."""

    code = "conversion-error"

    def __init__(self, message: str, span: Optional[Span] = None):
        super().__init__(message)
        self.span = span

    def diagnostic(self) -> Diagnostic:
        return Diagnostic(Severity.FATAL, self.code, str(self), self.span)


class InvalidCharacter(ConversionError):
    code = "invalid-character"


class EndOfInput(ConversionError):
    code = "end-of-input"


class MalformedPattern(ConversionError):
    code = "malformed-pattern"


class ExpansionDepthExceeded(ConversionError):
    code = "expansion-depth-exceeded"


class UnbalancedGroup(ConversionError):
    code = "unbalanced-group"


class UnterminatedMath(ConversionError):
    code = "unterminated-math"


class UnterminatedEnvironment(ConversionError):
    code = "unterminated-environment"


class ConversionTimeout(ConversionError):
    code = "timeout"


class TooManyErrors(ConversionError):
    code = "too-many-errors"


class DuplicateDocumentId(ValueError):
    pass


class InputDirUnreadable(OSError):
    pass
