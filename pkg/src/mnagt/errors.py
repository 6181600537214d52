"""Exception types shared across the package.

The CLI maps these onto exit codes: ConfigError -> 1, DataError -> 2.
"""


class ShapeError(ValueError):
    """Operands have incompatible shapes; the message names both."""


class ConfigError(ValueError):
    """A configuration value is out of range or inconsistent."""


class DataError(ValueError):
    """Dataset files are missing, malformed, or reference invalid indices."""
