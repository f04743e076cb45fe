"""Exception hierarchy shared across the package."""


class NanoVoiceError(Exception):
    """Base class for all package errors."""


class DimensionError(NanoVoiceError, ValueError):
    """Operand shapes do not agree."""


class DomainError(NanoVoiceError, ValueError):
    """A scalar argument is outside its valid range."""


class DegenerateInputError(NanoVoiceError, ValueError):
    """Input has no usable content (all-zero mask, zero vector, ...)."""


class NonFiniteError(NanoVoiceError, FloatingPointError):
    """A NaN or Inf appeared in a result."""


class ConfigurationError(NanoVoiceError, ValueError):
    pass


class SingularColumnError(NanoVoiceError, ArithmeticError):
    """A merged weight column has (numerically) zero norm under normalization."""


class FormatError(NanoVoiceError):
    """Checkpoint bytes are malformed. ``offset`` is the byte where parsing failed."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class CompatibilityError(NanoVoiceError, ValueError):
    """A checkpoint or bank does not fit the session it is loaded into."""


class TrainingError(NanoVoiceError, RuntimeError):
    """Training diverged (NaN/Inf loss)."""
