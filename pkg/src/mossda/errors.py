"""Exception types shared across the package."""


class ContractError(ValueError):
    """An operation was called with arguments that violate its contract."""


class ConfigError(ValueError):
    """A configuration value is invalid or inconsistent."""


class DatasetError(ValueError):
    """A dataset directory is missing files or fails validation."""


class PartitionError(ValueError):
    """The labeled/unlabeled target split cannot be constructed."""


class AggregationError(ValueError):
    pass


class TrainingAborted(RuntimeError):
    """Raised when a loss turns non-finite; carries the last diagnostics rows."""

    def __init__(self, message, snapshot=None):
        super().__init__(message)
        self.snapshot = list(snapshot or [])
