"""Exception types shared across the package."""


class TsadcError(Exception):
    pass


class ShapeError(TsadcError, ValueError):
    pass


class ContractError(TsadcError, ValueError):
    """A caller violated an operation's precondition."""


class NumericError(TsadcError, FloatingPointError):
    pass


class ConfigError(TsadcError, ValueError):
    pass


class FormatError(TsadcError, ValueError):
    """Malformed dataset or checkpoint file.

    ``offset`` is the byte position where reading failed, when known.
    """

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class VersionError(TsadcError, ValueError):
    pass
