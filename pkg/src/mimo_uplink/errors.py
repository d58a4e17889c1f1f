"""Exception types raised across the receiver package."""


class ConfigurationError(ValueError):
    """Invalid or unsupported system configuration."""


class ShapeError(ValueError):
    """Array dimensions do not match the configuration."""


class FramingError(ValueError):
    """Bit or sample counts do not fit the framing rules."""


class InterpolationError(ValueError):
    """Too few estimate points for the requested interpolation."""


class CoverageError(ValueError):
    """A channel estimate does not cover the requested subcarrier."""


class IncompleteSlotError(RuntimeError):
    """Slot data is missing antennas or symbols."""


class SingularityError(ArithmeticError):
    """A linear system is singular or not positive definite."""


class ParseError(ValueError):
    """Malformed text input; carries the 1-based line and column."""

    def __init__(self, message: str, line: int, column: int = 0):
        super().__init__(f"line {line}, column {column}: {message}")
        self.line = line
        self.column = column
