"""Exception types shared across the package."""


class SmakError(Exception):
    """Base class for all package errors."""


class ConfigError(SmakError):
    """Invalid configuration: bad shapes, malformed specs, out-of-range settings."""


class InputError(SmakError):
    """Runtime data problem: label out of range, shape mismatch at call time."""


class UsageError(SmakError):
    """API misuse: backward on a non-scalar, empty model list, and similar."""


class TrainingError(SmakError):
    """Training diverged or could not proceed."""


class CheckpointError(SmakError):
    """Checkpoint or tensor-archive file could not be read."""


class DataError(SmakError):
    """Dataset file missing or malformed."""
