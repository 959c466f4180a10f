"""Exception hierarchy shared across the engine."""


class SplatgenError(Exception):
    """Base class for all engine errors."""


class InvalidParameterError(SplatgenError, ValueError):
    """Non-finite or out-of-domain numeric input."""


class ShapeError(SplatgenError, ValueError):
    """Array shape does not match the declared contract."""


class ConfigError(SplatgenError, ValueError):
    """Invalid configuration value or empty sampling range."""


class GuidanceUnavailableError(SplatgenError, RuntimeError):
    """A score provider failed to produce a prediction."""


class DegenerateModelError(SplatgenError, RuntimeError):
    """The Gaussian cloud collapsed (e.g. pruned to zero Gaussians)."""


class InsufficientFramesError(SplatgenError, ValueError):
    """Too few frames for the requested metric."""


class InvalidFeatureError(SplatgenError, ValueError):
    """Feature rows violate metric preconditions (e.g. zero norm)."""


class ParseError(SplatgenError, ValueError):
    """Malformed persisted file; carries a byte offset when known."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset
