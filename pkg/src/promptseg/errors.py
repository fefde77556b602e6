"""Exception hierarchy shared across the package."""


class PromptsegError(Exception):
    """Base class for all package-specific errors."""


class RejectedInputError(PromptsegError, ValueError):
    """Input violates a documented precondition (bad shape, range, or value)."""


class ConfigError(PromptsegError):
    """Invalid or inconsistent configuration."""


class NoForegroundError(PromptsegError):
    """A mask or slice expected to contain foreground is empty."""


class NoPredictionError(PromptsegError):
    """The requested class is absent from a prediction."""


class EmptyMaskError(PromptsegError):
    """An operation requiring a nonempty mask received an empty one."""


class NiftiError(PromptsegError):
    """Base class for file-format errors."""


class NotNiftiError(NiftiError):
    """File is not a NIfTI-1 single-file image."""


class UnsupportedFormatError(NiftiError):
    """Valid NIfTI, but outside the supported subset."""


class CorruptFileError(NiftiError):
    """Header and payload disagree, or the payload is truncated."""


class UnknownVolumeError(PromptsegError):
    """A phantom oracle was asked about a volume it holds no ground truth for."""


class OracleUnavailableError(PromptsegError):
    """An external oracle did not respond within the timeout."""


class OracleProtocolError(PromptsegError):
    """An external oracle's response violates the exchange protocol."""
