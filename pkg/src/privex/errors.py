"""Exception hierarchy shared by every module in the package."""


class PrivexError(Exception):
    """Base class for all package errors."""


class IndivisibleLength(PrivexError, ValueError):
    pass


class BadChunking(PrivexError, ValueError):
    pass


class TooManyQubits(PrivexError, ValueError):
    pass


class DimensionMismatch(PrivexError, ValueError):
    pass


class BadSpec(PrivexError, ValueError):
    pass


class UnsupportedK(PrivexError, ValueError):
    pass


class WrongWidth(PrivexError, ValueError):
    pass


class UnknownSetting(PrivexError, ValueError):
    pass


class TooLargeK(PrivexError, ValueError):
    pass


class InconsistentSpec(PrivexError, ValueError):
    pass


class BadSetting(PrivexError, ValueError):
    pass


class BadParameters(PrivexError, ValueError):
    pass


class LengthMismatch(PrivexError, ValueError):
    pass


class SeedTooShort(PrivexError, ValueError):
    pass


class EnsembleReused(PrivexError, RuntimeError):
    """A device ensemble was offered for a second protocol run."""


class TooLarge(PrivexError, ValueError):
    pass


class InvalidDistribution(PrivexError, ValueError):
    pass


class BadEpsilon(PrivexError, ValueError):
    pass


class TooFewSamples(PrivexError, ValueError):
    pass


class ConfigError(PrivexError, ValueError):
    """Invalid experiment configuration; ``field`` names the offending key."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field
        self.message = message
