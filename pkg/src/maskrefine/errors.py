"""Exception types shared across the package."""


class MaskRefineError(Exception):
    """Base class for errors raised by this package."""


class ValidationError(MaskRefineError, ValueError):
    """Invalid input values or inconsistent geometry."""


class ConfigError(MaskRefineError, ValueError):
    """Malformed or missing configuration."""


class CheckpointError(MaskRefineError, ValueError):
    """Unreadable or incompatible model checkpoint."""
