"""Exception types shared across the package.

Invalid arguments raise plain ValueError; the classes here cover the
remaining failure kinds that the CLI maps to distinct exit codes.
"""


class FormatError(Exception):
    """An input file violates the expected on-disk format."""


class ValidationError(Exception):
    """A manifest violates a corpus invariant (splits, labels, files)."""


class ConfigError(Exception):
    """A run configuration is inconsistent or incompatible."""


class NumericError(Exception):
    """A numeric pipeline produced non-finite values."""
