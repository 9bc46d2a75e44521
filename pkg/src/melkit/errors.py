"""Exception types shared across the toolkit."""


class MelkitError(Exception):
    """Base class for all toolkit errors."""


class InvalidInput(MelkitError):
    """Input data violates a precondition (empty clip, bad range, ...)."""


class SampleRateError(InvalidInput):
    """Audio is not at the required 16 kHz sample rate."""


class IoError(MelkitError):
    """A referenced file is missing or unreadable/unwritable."""


class ParseError(MelkitError):
    """Malformed manifest or config content; message carries the line number."""


class VocabError(MelkitError):
    """A label falls outside the declared vocabulary."""


class TooShort(MelkitError):
    """Track shorter than one snippet window; callers skip and resample."""


class EmptyCatalog(MelkitError):
    """No eligible tracks to sample from."""


class ShapeError(MelkitError):
    """Tensor shapes incompatible for the requested operation."""


class NormError(MelkitError):
    """A vector that must be normalized has (near-)zero norm."""


class NanError(MelkitError):
    """A non-finite gradient or parameter was encountered."""


class FormatError(MelkitError):
    """A binary artifact file does not match its declared format."""


class DegenerateTarget(MelkitError):
    """Regression target has zero variance; the score is undefined."""


class EmptyDataset(MelkitError):
    """A split needed for training or evaluation has no items."""


class ConfigError(MelkitError):
    """Run configuration is invalid (unknown key, bad value, missing file)."""
