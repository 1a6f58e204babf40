"""Exception hierarchy shared across the package."""


class VidTextError(Exception):
    pass


class ShapeError(VidTextError, ValueError):
    """Operand shapes do not conform."""


class DomainError(VidTextError, ValueError):
    """Argument outside the mathematical domain of an operation."""


class DegenerateInputError(VidTextError, ValueError):
    pass


class ContractError(VidTextError, RuntimeError):
    """A caller-side precondition was violated."""


class CapacityError(VidTextError, ValueError):
    pass


class MalformedCaptionError(VidTextError, ValueError):
    pass


class FormatError(VidTextError, ValueError):
    """A binary file could not be decoded.

    ``offset`` is the byte position at which decoding failed.
    """

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class UnsupportedVersionError(FormatError):
    pass


class ConfigError(VidTextError, ValueError):
    def __init__(self, key, message):
        super().__init__(f"{key}: {message}")
        self.key = key


class TrainingAborted(VidTextError, RuntimeError):
    """Raised when the loss goes non-finite; carries the last good checkpoint."""

    def __init__(self, message, last_checkpoint=None):
        super().__init__(message)
        self.last_checkpoint = last_checkpoint


class LengthError(ShapeError):
    """Sequence longer than the table that indexes it."""
