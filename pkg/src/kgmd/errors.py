"""Exception types shared across the package."""


class KgmdError(Exception):
    """Base class for all package errors."""


class ConfigError(KgmdError):
    """Invalid or inconsistent configuration."""


class DataError(KgmdError):
    """Malformed input data or violated data precondition."""


class CheckpointError(KgmdError):
    """Unreadable, truncated or mismatched checkpoint file."""


class TrainingError(KgmdError):
    """Training aborted (e.g. non-finite loss)."""
