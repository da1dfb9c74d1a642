"""Exception types shared across the package."""


class MmkdError(Exception):
    """Base class for package errors."""


class ConfigError(MmkdError):
    """Invalid configuration values or call arguments."""


class DatasetError(MmkdError):
    """Missing, malformed, or inconsistent dataset files."""


class CheckpointError(MmkdError):
    """Missing, malformed, or incompatible checkpoint files."""


class TrainingDiverged(MmkdError):
    """Training produced a non-finite loss."""
