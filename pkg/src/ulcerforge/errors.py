"""Exception types shared across the workbench."""


class UlcerforgeError(Exception):
    """Base class for all first-party errors."""


class ConfigError(UlcerforgeError, ValueError):
    """A configuration value violates its documented constraint."""


class ShapeError(UlcerforgeError, ValueError):
    """Dimension mismatch, naming the offending axis."""

    def __init__(self, op: str, axis: str, expected, got):
        self.op = op
        self.axis = axis
        self.expected = expected
        self.got = got
        super().__init__(f"{op}: axis '{axis}' expected {expected}, got {got}")


class DataError(UlcerforgeError, ValueError):
    """Malformed or inconsistent input data (files, records, series)."""


class NumericError(UlcerforgeError, ArithmeticError):
    """A computation left the finite range or hit an ill-posed case."""

    def __init__(self, message: str, diagnostics: dict | None = None):
        self.diagnostics = diagnostics or {}
        super().__init__(message)


class UsageError(UlcerforgeError, RuntimeError):
    """An API was called outside its contract."""
