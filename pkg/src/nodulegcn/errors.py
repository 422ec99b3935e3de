"""Exception types shared across the package."""


class NoduleGcnError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(NoduleGcnError, ValueError):
    """Tensor or matrix shapes do not satisfy an operation's contract."""


class ValidationError(NoduleGcnError, ValueError):
    """Input values violate a documented precondition."""


class ConfigError(NoduleGcnError, ValueError):
    """A configuration value is missing, malformed, or inconsistent."""


class FormatError(NoduleGcnError, ValueError):
    """A file does not conform to its declared on-disk format."""


class UsageError(NoduleGcnError, RuntimeError):
    """An API was called in a way its contract forbids."""


class StageError(NoduleGcnError, RuntimeError):
    """A pipeline stage failed; carries the stage name for reporting."""

    def __init__(self, stage, message):
        super().__init__(f"stage '{stage}' failed: {message}")
        self.stage = stage
