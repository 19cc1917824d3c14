"""
Exception hierarchy for the segmentation app.

Every error raised on purpose by the library derives from ScribbleMixError,
so management commands can translate library failures into exit codes
without catching unrelated exceptions.
"""


class ScribbleMixError(Exception):
    """Base class for all library errors."""


class ShapeError(ScribbleMixError, ValueError):
    """
    Raised when tensor extents do not fit an operation.

    Carries the operation name and the offending dimension so the message
    points straight at the mismatch.
    """

    def __init__(self, op, dim, expected, actual):
        self.op = op
        self.dim = dim
        self.expected = expected
        self.actual = actual
        super().__init__(
            f"{op}: dimension '{dim}' expected {expected}, got {actual}"
        )


class NSTFormatError(ScribbleMixError):
    """Raised when an NST file cannot be decoded."""

    def __init__(self, path, reason):
        self.path = str(path)
        self.reason = reason
        super().__init__(f"{self.path}: {reason}")


class CheckpointError(ScribbleMixError):
    """Raised for malformed or mismatched checkpoint files."""


class DatasetError(ScribbleMixError):
    """Raised for missing files, empty splits or unwritable output directories."""


class MixPlanError(ScribbleMixError, ValueError):
    """Raised when a mix plan cannot be built for the requested geometry."""


class DegenerateInputError(ScribbleMixError, ValueError):
    """Raised for inputs with no usable signal (zero variance, zero norm, no labels)."""


class TrainingDivergedError(ScribbleMixError):
    """
    Raised when a training step produces a non-finite loss.

    The offending mix plans are kept in text form for the diagnostic dump.
    """

    def __init__(self, message, plan_text=''):
        self.plan_text = plan_text
        super().__init__(message)


class ConfigError(ScribbleMixError):
    """
    Raised for invalid run configuration.

    `errors` maps each offending key to its messages.
    """

    def __init__(self, errors):
        self.errors = dict(errors)
        detail = '; '.join(f"{key}: {' '.join(messages)}" for key, messages in self.errors.items())
        super().__init__(f"invalid configuration ({detail})")
