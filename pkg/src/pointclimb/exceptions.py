"""Exception types shared across the package."""


class InvalidArgumentError(ValueError):
    """An argument violates a documented precondition."""


class InvalidStateError(RuntimeError):
    """An object is not in a state that permits the requested operation."""


class ParseError(ValueError):
    """Malformed input file. ``offset`` is the byte offset of the problem."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte {offset})"
        super().__init__(message)
        self.offset = offset


class LoadError(IOError):
    """A dataset file is missing a field or has an inconsistent layout."""

    def __init__(self, message, field=None):
        super().__init__(message)
        self.field = field


class ConfigError(ValueError):
    """An experiment configuration failed validation."""
