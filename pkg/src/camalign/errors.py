"""Exception types shared across the package."""


class CamalignError(Exception):
    """Base class for errors raised by this package."""


class ConfigError(CamalignError):
    """A configuration value (file or CLI flag) is invalid."""


class DataError(CamalignError):
    """A dataset, checkpoint, or on-disk artifact is missing or malformed."""


class NumericError(CamalignError):
    """A numeric invariant failed: non-finite values, missing gradients,
    or a failed finite-difference check."""
