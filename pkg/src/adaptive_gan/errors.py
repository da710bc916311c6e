"""Exception hierarchy shared by every module."""


class AdaptiveGanError(Exception):
    """Base class for all package errors."""


class ArgumentError(AdaptiveGanError, ValueError):
    """An argument violates an operation's precondition."""


class FormatError(AdaptiveGanError):
    """A dataset file does not follow its binary format."""


class ConsistencyError(AdaptiveGanError):
    """Two inputs that must agree (e.g. image and label files) do not."""


class TrainingError(AdaptiveGanError):
    """Training diverged. ``step`` holds the global step index."""

    def __init__(self, message, step=None):
        super().__init__(message if step is None else f"{message} (step {step})")
        self.step = step


class CorruptCheckpointError(AdaptiveGanError):
    pass


class VersionError(AdaptiveGanError):
    pass


class IoError(AdaptiveGanError, OSError):
    pass


class ValidationError(AdaptiveGanError):
    """Resolved run configuration violates a type invariant."""
