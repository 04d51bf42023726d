"""
Utility functions for validation, error handling, and helper operations.
Every error the toolkit raises is defined here so callers can catch one base class.
"""

import re
from decimal import Decimal, InvalidOperation
from typing import Any, Optional, Sequence, Tuple


class ToolkitError(Exception):
    """Base class for every error raised by the toolkit."""
    pass


class ValidationError(ToolkitError):
    """Custom exception for validation errors."""
    pass


# meaning representations
class UnbalancedBrackets(ValidationError):
    pass


class EmptyExpression(ValidationError):
    pass


class UnclassifiableToken(ValidationError):
    pass


class ColumnOutOfRange(ValidationError):
    pass


class SqlParseError(ValidationError):
    pass


class EmptySchema(ValidationError):
    pass


class SpanNotFound(ValidationError):
    """A condition value does not occur in the question."""
    pass


# sketches
class NonConforming(ToolkitError):
    """Output tokens do not realize the given sketch."""
    pass


class NonConformingGold(NonConforming):
    pass


class SketchMismatch(ToolkitError):
    pass


# numerics
class ShapeMismatch(ToolkitError):
    pass


class EmptySequence(ToolkitError):
    pass


class TargetOutOfRange(ToolkitError):
    pass


class NonFinite(ToolkitError):
    pass


class EmptyInput(ToolkitError):
    pass


class EmptyCatalog(ToolkitError):
    pass


class MaxLengthExceeded(ToolkitError):
    pass


# data and runs
class EmptyDataset(ToolkitError):
    pass


class LengthMismatch(ToolkitError):
    pass


class ParseError(ToolkitError):
    """Malformed dataset record; carries the 1-based line number."""

    def __init__(self, message: str, line_number: Optional[int] = None):
        self.line_number = line_number
        if line_number is not None:
            message = f"line {line_number}: {message}"
        super().__init__(message)


class CorruptCheckpoint(ToolkitError):
    """Checkpoint header and payload disagree."""

    def __init__(self, message: str, tensor_name: Optional[str] = None):
        self.tensor_name = tensor_name
        if tensor_name is not None:
            message = f"{message} (tensor '{tensor_name}')"
        super().__init__(message)


class ConfigError(ToolkitError):
    pass


class UsageError(ToolkitError):
    pass


def validate_tokens(tokens: Sequence[str], what: str = "input") -> Tuple[bool, Optional[str]]:
    """
    Validate a pre-tokenized sequence.

    Args:
        tokens: Token sequence
        what: Name used in the error message

    Returns:
        Tuple of (is_valid, error_message)
    """
    if tokens is None or len(tokens) == 0:
        return False, f"{what} cannot be empty"

    for token in tokens:
        if not isinstance(token, str) or not token or token != token.strip():
            return False, f"{what} contains an invalid token: {token!r}"

    return True, None


def validate_column_names(columns: Sequence[Sequence[str]]) -> Tuple[bool, Optional[str]]:
    """
    Validate table column names (each a sequence of words).

    Args:
        columns: Column names

    Returns:
        Tuple of (is_valid, error_message)
    """
    if not columns:
        return False, "Table schema needs at least one column"

    for idx, words in enumerate(columns):
        if not words:
            return False, f"Column {idx} has an empty name"

    return True, None


def validate_probability(value: float, name: str, upper_inclusive: bool = False) -> Tuple[bool, Optional[str]]:
    """
    Validate a rate in [0, 1) (or [0, 1] when upper_inclusive).

    Args:
        value: Value to check
        name: Parameter name used in the message
        upper_inclusive: Whether 1.0 is allowed

    Returns:
        Tuple of (is_valid, error_message)
    """
    if value < 0 or value > 1 or (value == 1 and not upper_inclusive):
        bound = "[0, 1]" if upper_inclusive else "[0, 1)"
        return False, f"{name} must be in {bound}, got {value}"
    return True, None


def sanitize_text(text: str) -> str:
    """
    Sanitize a text line by removing control characters and collapsing whitespace.

    Args:
        text: Input text

    Returns:
        Sanitized text
    """
    if not text:
        return ""

    text = re.sub(r'[\x00-\x08\x0B-\x0C\x0E-\x1F\x7F]', '', text)
    text = ' '.join(text.split())

    return text.strip()


def format_error_message(error: Exception) -> str:
    """
    Format error message for a one-line diagnostic.

    Args:
        error: Exception object

    Returns:
        Formatted error message
    """
    error_type = type(error).__name__
    error_msg = str(error)

    if isinstance(error, FileNotFoundError):
        return f"{error_type}: {error.filename or error_msg}"

    if error_msg:
        return f"{error_type}: {error_msg.splitlines()[0]}"

    return f"{error_type}: an unexpected error occurred"


def truncate_text(text: str, max_length: int = 80, suffix: str = "...") -> str:
    """
    Truncate text to maximum length.

    Args:
        text: Input text
        max_length: Maximum length
        suffix: Suffix to add when truncated

    Returns:
        Truncated text
    """
    if not text or len(text) <= max_length:
        return text

    return text[:max_length - len(suffix)] + suffix


def coerce_number(value: Any) -> Optional[Decimal]:
    """
    Coerce a cell or condition value to a decimal number.

    Whitespace is trimmed; anything that does not parse as a finite decimal yields None.
    """
    if value is None or isinstance(value, bool):
        return None
    text = str(value).strip().replace(",", "")
    if not text:
        return None
    try:
        number = Decimal(text)
    except InvalidOperation:
        return None
    if not number.is_finite():
        return None
    return number


def canonical_decimal(number: Decimal) -> str:
    """Render a decimal without exponent or trailing zeros ("1996.0" -> "1996")."""
    if number == number.to_integral_value():
        return str(number.quantize(Decimal(1)))
    return format(number.normalize(), "f")


def canonical_value(value: Any) -> str:
    """
    Canonical comparison form of a query result value or aggregate.

    Numbers become canonical decimal strings; text is trimmed and casefolded.
    """
    number = coerce_number(value)
    if number is not None:
        return canonical_decimal(number)
    return " ".join(str(value).split()).casefold()


if __name__ == "__main__":
    print("Testing validation functions...")

    print("\nToken validation:")
    print(validate_tokens(["which", "state"]))
    print(validate_tokens([]))

    print("\nCanonical values:")
    print(canonical_value(" 1996.0 "), canonical_value("Mikhail  Snitko"))
