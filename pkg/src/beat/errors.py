"""Exception types shared across the package."""


class BeatError(Exception):
    """Base class for all errors raised by this package."""


class ParseError(BeatError):
    """Malformed textual input (headers, CSV, token strings).

    ``position`` is a human-readable locator such as a line number or a
    character offset; it is also embedded in the message.
    """

    def __init__(self, message, position=None):
        if position is not None:
            message = f"{message} (at {position})"
        super().__init__(message)
        self.position = position


class FormatError(BeatError):
    """Malformed or unsupported binary container (BSEG, checkpoint, .dat)."""


class ConfigError(BeatError):
    """Configuration values violate an invariant."""
