"""Exception hierarchy shared across the package."""


class HypavError(Exception):
    """Base class for every error raised by hypav."""


class DomainError(HypavError, ValueError):
    """An input lies outside the domain of a geometric map."""


class NumericalDomainError(HypavError, ArithmeticError):
    """A computation hit a numerically degenerate configuration."""


class ConfigError(HypavError, ValueError):
    """Invalid configuration or inconsistent option combination."""


class DataError(HypavError):
    """Malformed or inconsistent dataset content."""


class FormatError(DataError):
    """Feature-file decoding failure.

    ``code`` identifies the failure: ``"bad_magic"``, ``"version_mismatch"``,
    ``"truncated_header"`` or ``"truncated_payload"``.
    """

    def __init__(self, code, message):
        super().__init__(f"{code}: {message}")
        self.code = code
