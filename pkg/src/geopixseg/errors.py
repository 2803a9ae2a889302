"""Exception types shared across the package.

The CLI maps these onto exit codes: ConfigurationError -> 2, everything
else -> 1.
"""


class GeoPixSegError(Exception):
    """Base class for package errors."""


class ConfigurationError(GeoPixSegError):
    """Invalid or inconsistent configuration (bad field, unusable geometry)."""


class DataError(GeoPixSegError):
    """Dataset ingestion or format failure; message names the offending record."""


class CheckpointError(GeoPixSegError):
    """Checkpoint cannot be read or does not match the model being loaded."""
