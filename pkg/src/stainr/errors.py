"""Exception hierarchy shared across the package.

The CLI maps these onto process exit codes: configuration problems exit
with 2, data problems with 3, numeric failures with 4.
"""


class StainrError(Exception):
    """Base class for all package-specific errors."""


class ShapeError(StainrError, ValueError):
    """Operand shapes do not conform; the message names both shapes."""


class ConfigError(StainrError, ValueError):
    """Invalid configuration value or unparseable config file."""


class DataError(StainrError, RuntimeError):
    """Dataset or image file missing, unreadable, or malformed."""


class NumericError(StainrError, RuntimeError):
    """Non-finite values, failed gradient checks, or corrupt checkpoints."""
