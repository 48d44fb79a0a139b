"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid configuration or argument combination."""


class ShapeError(ValueError):
    """Array shapes are inconsistent with an operation."""


class ParseError(ValueError):
    """A data file could not be parsed."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class StateError(RuntimeError):
    """An operation was called in the wrong order (e.g. backward before forward)."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss or gradient."""
