"""Exception types shared across the package."""


class OmtsegError(Exception):
    """Base class for all package errors."""


class DimensionError(OmtsegError):
    """Operand shapes are incompatible with the requested operation."""


class ContractError(OmtsegError):
    """An operation was called outside its contract (misuse, not data)."""


class NumericError(OmtsegError):
    """Non-finite values where finite ones are required."""


class ConfigError(OmtsegError):
    """Invalid configuration value or combination."""


class ParseError(OmtsegError):
    """Malformed on-disk artifact (manifest, config, vocabulary)."""

    def __init__(self, message, path=None, line=None):
        loc = ""
        if path is not None:
            loc = f"{path}"
            if line is not None:
                loc += f":{line}"
            loc += ": "
        super().__init__(loc + message)
        self.path = path
        self.line = line
