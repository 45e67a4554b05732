"""Exception hierarchy shared across the package.

The CLI maps these onto stable exit codes: validation-type errors exit 1,
numeric failures exit 2, I/O failures exit 3.
"""


class GatedKDError(Exception):
    """Base class for all package errors."""


class ValidationError(GatedKDError):
    """Bad shapes, ranges, or violated preconditions."""


class ConfigError(ValidationError):
    """Inconsistent or incomplete configuration."""


class CapacityError(ValidationError):
    """A sequence exceeds the model's configured maximum length."""


class IngestionError(ValidationError):
    """Corpus files that cannot be ingested (e.g. unaligned line counts)."""


class CheckpointError(ValidationError):
    """Checkpoint that cannot be loaded or does not match its corpus."""


class NumericError(GatedKDError):
    """Non-finite values where finite ones are required."""
