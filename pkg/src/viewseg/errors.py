"""Shared error types for binary artifact parsing."""


class FormatError(ValueError):
    """A file violates its binary format; carries the failing byte offset."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset
