"""Exception taxonomy shared by the whole package.

Every error carries a process exit code so the CLI can map failures
uniformly: 2 configuration, 3 data, 4 numerical.
"""


class SemclError(Exception):
    """Base class for all framework errors."""

    exit_code = 1


class ConfigurationError(SemclError):
    """Invalid configuration: bad dimensions, unknown keys, indivisible splits."""

    exit_code = 2


class ProtocolError(SemclError):
    """Violation of the incremental-session contract (ordering, ranges, empty pool)."""

    exit_code = 2


class DataError(SemclError):
    """Dataset problems: missing classes, empty splits, undecodable images."""

    exit_code = 3


class EmptyClassError(DataError):
    """A class has no samples where at least one is required."""


class MissingEmbeddingError(DataError):
    """Template text absent from the embedding cache with no live encoder configured."""


class ChecksumError(DataError):
    """Stored artifact bytes do not match the recorded checksum."""


class NumericalError(SemclError):
    """Non-finite values where finite numbers are required."""

    exit_code = 4


class DegenerateInputError(NumericalError):
    """Zero-norm vector where a direction is required."""
