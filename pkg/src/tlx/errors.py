"""Exception types shared across the toolkit."""


class TlxError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(TlxError):
    """Unusable arguments, bad configuration, or missing paths."""


class DataFormatError(TlxError):
    """Malformed input data; messages name the offending line or byte offset."""


class ShapeError(TlxError):
    """Tensor or layout shapes inconsistent with the declared architecture."""


class NumericError(TlxError):
    """Non-finite values or numerically impossible requests."""
