"""Exception types shared across the package."""


class PgpcError(Exception):
    """Base class for all package-specific errors."""


class ConfigurationError(PgpcError):
    """Mismatched shapes, channel counts, scales, or invalid settings."""


class ContractViolationError(PgpcError):
    """An operation was handed tensors that break its preconditions."""


class DegenerateInputError(PgpcError):
    """Empty clouds, zero-extent bounding boxes, zero-area meshes."""


class ParameterRangeError(PgpcError):
    """A body parameter falls outside the representable quantizer range."""


class ParseError(PgpcError):
    """A file could not be parsed; carries the offending position."""

    def __init__(self, message, *, position=None):
        if position is not None:
            message = f"{message} (at {position})"
        super().__init__(message)
        self.position = position


class DecodeError(PgpcError):
    """A bitstream is truncated, corrupted, or inconsistent."""


class EvaluationError(PgpcError):
    """A metric could not be computed (e.g. no rate-curve overlap)."""
