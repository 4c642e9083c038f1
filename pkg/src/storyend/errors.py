"""Exception hierarchy shared by all storyend modules."""


class StoryEndError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(StoryEndError):
    """Tensor shapes are incompatible for the requested operation."""


class NumericError(StoryEndError):
    """A computation produced NaN or Inf values."""


class ContractError(StoryEndError):
    """An operation was called outside its documented contract."""


class EmptySpanError(ContractError):
    """A pooling mask or span selected zero elements."""


class MissingGradError(ContractError):
    """Optimizer step requested before gradients were populated."""


class AnnotationError(StoryEndError):
    """A story record carries inconsistent annotations (spans, ids)."""


class SchemaError(StoryEndError):
    """A corpus line failed schema validation."""

    def __init__(self, line_number, message):
        super().__init__(f"line {line_number}: {message}")
        self.line_number = line_number


class DataError(StoryEndError):
    """A record is structurally valid but unusable (e.g. empty ending)."""


class CheckpointError(StoryEndError):
    """Checkpoint file is corrupt or incompatible with the model config."""


class ConfigError(StoryEndError):
    """Configuration file is missing keys or carries bad values."""
