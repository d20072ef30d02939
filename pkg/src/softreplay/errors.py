"""Exception types shared across the package."""


class SoftReplayError(Exception):
    """Base class for all package errors."""


class ShapeError(SoftReplayError):
    """Operand shapes are inconsistent."""


class NonFiniteError(SoftReplayError):
    """An operation produced NaN or Inf."""


class GradError(SoftReplayError):
    """Invalid differentiation request (bad seed, missing rule, ...)."""


class TargetError(SoftReplayError):
    """A soft-label target row is not a probability distribution."""


class EmptyBufferError(SoftReplayError):
    """Sampling was requested from an empty memory buffer."""


class MissingLogitsError(SoftReplayError):
    """A replay item lacks the stored logits its strategy requires."""


class FormatError(SoftReplayError):
    """A file does not match its documented byte layout."""


class ConfigError(SoftReplayError):
    """Invalid experiment configuration; message names the offending key."""

    def __init__(self, key: str, reason: str):
        self.key = key
        self.reason = reason
        super().__init__(f"{key}: {reason}")
