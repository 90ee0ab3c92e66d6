"""Exception types shared across the toolkit."""


class DarForgeError(Exception):
    """Base class for all toolkit errors."""


class RejectedInputError(DarForgeError, ValueError):
    """An argument violates an operation's precondition (shape, range, size)."""


class ParseError(DarForgeError, ValueError):
    """A byte stream could not be parsed.

    ``offset`` is the byte position at which parsing failed.
    """

    def __init__(self, message, offset=0):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class IntegrityError(DarForgeError, ValueError):
    """A checkpoint failed validation; ``field`` names the failing part."""

    def __init__(self, field, message):
        super().__init__(f"checkpoint {field}: {message}")
        self.field = field
