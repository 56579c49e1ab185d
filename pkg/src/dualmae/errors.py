"""Exception taxonomy shared across modules.

The CLI maps these onto exit codes: ConfigError -> 1, DataError -> 2, any
other failure -> 3.
"""


class ConfigError(ValueError):
    """Invalid configuration, unknown keys, inconsistent settings."""


class DataError(ValueError):
    """Malformed or missing input data / artifacts."""


class TrainingDiverged(RuntimeError):
    """Raised when a training run hits non-finite losses or gradients."""
