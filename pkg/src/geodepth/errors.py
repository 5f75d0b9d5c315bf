class GeoDepthError(Exception):
    """Base class for library errors."""


class InputError(GeoDepthError, ValueError):
    """Caller supplied data of the wrong shape, range or format."""


class ParseError(InputError):
    """A file on disk could not be decoded."""

    def __init__(self, path, offset: int, message: str):
        super().__init__(f"{path}: byte {offset}: {message}")
        self.path = path
        self.offset = offset


class ConfigError(GeoDepthError, ValueError):
    """Inconsistent configuration, e.g. a non-invertible camera."""


class NumericError(GeoDepthError, ArithmeticError):
    """NaN/Inf encountered during a forward or backward pass."""


class HarnessError(GeoDepthError, RuntimeError):
    """Verification harness misuse, such as a non-deterministic closure."""
