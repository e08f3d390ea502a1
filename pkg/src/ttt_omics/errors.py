"""Exception types shared across the package."""


class TttOmicsError(Exception):
    """Base class for errors raised by this package."""


class DimensionError(TttOmicsError):
    """Operand shapes are incompatible for the requested operation."""


class ContractError(TttOmicsError):
    """A documented precondition was violated by the caller."""


class ParseError(TttOmicsError):
    """A file could not be parsed; the message carries the location."""


class ConfigError(TttOmicsError):
    """Invalid configuration or missing prerequisite (maps to exit code 2)."""
