class DSIError(Exception):
    """Base class for errors raised by this package."""


class ShapeError(DSIError, ValueError):
    pass


class ConfigError(DSIError, ValueError):
    pass


class TrainingError(DSIError, FloatingPointError):
    """Raised when training produces a non-finite loss or gradient."""

    def __init__(self, message, layer=None, step=None):
        super().__init__(message)
        self.layer = layer
        self.step = step


class StageError(DSIError):
    """A pipeline stage failed; ``stage`` names it and ``__cause__`` holds the error."""

    def __init__(self, stage, cause):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause
