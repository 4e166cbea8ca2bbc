"""Exception hierarchy shared across the package.

Exit-code mapping used by the CLI: UsageError -> 1, DataError -> 2,
anything else -> 3.
"""


class ZsadError(Exception):
    """Base class for package errors."""


class UsageError(ZsadError):
    """Bad command-line usage or invalid configuration supplied by the user."""


class ConfigError(UsageError):
    """A configuration value is out of its valid range or inconsistent."""


class DataError(ZsadError):
    """Input data (images, masks, manifests, checkpoints) is invalid."""


class CheckpointError(DataError):
    """A checkpoint failed validation or integrity checks."""


class UndefinedMetricError(ZsadError):
    """A metric is undefined for the given inputs (e.g. single-class labels)."""
