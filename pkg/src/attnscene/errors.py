"""Exception types shared across the package.

Each class maps onto one CLI exit code (see ``cli.EXIT_CODES``).
"""


class AscError(Exception):
    """Base class for every error raised by attnscene."""


class DimensionError(AscError, ValueError):
    pass


class ParameterError(AscError, ValueError):
    pass


class ConsistencyError(AscError, RuntimeError):
    pass


class NumericError(AscError, FloatingPointError):
    pass


class InputError(AscError, ValueError):
    pass


class ConfigError(AscError, ValueError):
    pass


class DataError(AscError, LookupError):
    pass


class FormatError(AscError, ValueError):
    """A file does not follow the expected binary or text layout."""


class IntegrityError(FormatError):
    """Magic bytes, lengths or checksum of a file do not match."""


class VersionError(FormatError):
    pass


class UnsupportedModeError(AscError, ValueError):
    pass
