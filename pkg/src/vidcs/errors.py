"""Exception types shared across the package."""


class VidcsError(Exception):
    """Base class for all package errors."""


class ShapeError(VidcsError):
    """Operands have incompatible shapes."""


class KernelError(VidcsError):
    """Convolution kernel geometry is unsupported."""


class GeometryError(VidcsError):
    """Frame or grid geometry does not match the block layout."""


class ConfigError(VidcsError):
    """A configuration value is out of range or inconsistent."""


class OptimizerError(VidcsError):
    """Optimizer state and parameters disagree."""


class UnsupportedRateError(VidcsError):
    """Requested compression ratio is outside what the model/operator supports."""


class FormatError(VidcsError):
    """A binary container is malformed."""


class ParseError(VidcsError):
    """A text/video stream is malformed; carries the byte offset of the fault."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class DivergenceError(VidcsError):
    """Training produced a non-finite loss."""
