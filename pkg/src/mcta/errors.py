"""Exception types shared across the package."""


class MctaError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(MctaError, ValueError):
    """An array has the wrong rank or an axis has the wrong length."""


class InvalidInputError(MctaError, ValueError):
    """An argument is outside the domain an operation accepts."""


class TapeStateError(MctaError, RuntimeError):
    """The gradient tape or optimizer state was used out of order."""


class ParseError(MctaError, ValueError):
    """A file on disk (WAV, manifest, cache, checkpoint, config) is malformed."""


class CacheError(ParseError):
    """A feature-cache or checkpoint blob failed validation."""
