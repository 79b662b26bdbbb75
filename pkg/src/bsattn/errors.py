"""Exception types shared across the package."""


class BSAError(Exception):
    """Base class for all errors raised by bsattn."""


class InvalidShape(BSAError, ValueError):
    pass


class FormatError(BSAError, ValueError):
    """A ``.bsal``/``.bsao`` file is malformed or truncated."""


class ConfigError(BSAError, ValueError):
    pass


class SelectionMismatch(BSAError, ValueError):
    """Query/KV selections do not belong to the bundle or geometry they are used with."""
