"""Exception hierarchy shared across the package."""


class TrinityError(Exception):
    """Base class for all package errors."""


class DimensionError(TrinityError, ValueError):
    pass


class LabelError(TrinityError, ValueError):
    pass


class DegenerateInputError(TrinityError, ValueError):
    pass


class ContractError(TrinityError, RuntimeError):
    pass


class InvalidCostError(TrinityError, ValueError):
    pass


class ShapeError(TrinityError, ValueError):
    pass


class SizeLimitError(TrinityError, ValueError):
    pass


class ConfigError(TrinityError, ValueError):
    pass


class ParseError(TrinityError, ValueError):
    """Malformed file contents. ``offset`` is the byte offset where parsing failed, if known."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ValidationError(TrinityError, ValueError):
    pass
