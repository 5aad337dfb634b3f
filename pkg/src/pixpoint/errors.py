"""Exception taxonomy shared across the package.

The CLI maps these onto its exit-code contract: ConfigError -> 2,
PrerequisiteError -> 3, NumericalError -> 4. Everything else is a bug.
"""


class PixpointError(Exception):
    """Base class for package errors."""


class ConfigError(PixpointError):
    """Invalid configuration: unknown keys, out-of-range values, bad shapes."""


class PrerequisiteError(PixpointError):
    """A required input (checkpoint, dataset, lock) is missing or unusable."""


class NumericalError(PixpointError):
    """Non-finite loss/gradient or an undefined metric."""


class DatasetError(PixpointError):
    """Dataset generation or I/O failure."""


class EmptyBatchError(ValueError):
    """Raised when a loss is requested over zero matched pairs."""
