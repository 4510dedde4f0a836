"""Exception types shared across the package.

Every operation raises one of these instead of bare ValueError so callers
(and the CLI exit-code mapping) can tell configuration mistakes apart from
corrupt inputs or numeric failures.
"""


class TseError(Exception):
    """Base class for all package errors."""


class FormatError(TseError):
    """A file is not in the expected format (wrong magic, channels, rate...)."""


class CorruptFileError(TseError):
    """A file has the right format markers but inconsistent contents."""


class RangeError(TseError):
    """A numeric value is outside its permitted range."""


class DegenerateInputError(TseError):
    """An input is formally valid but degenerate (silent signal, empty list)."""


class LengthError(TseError):
    """A signal or requested length is too short/long for the operation."""


class ShapeError(TseError):
    """Tensor or mask dimensions do not match."""


class EmptyInputError(TseError):
    """A time axis with zero frames where at least one is required."""


class NormalizationError(TseError):
    """A vector that must be length-normalized has zero norm."""


class ConfigurationError(TseError):
    """Invalid or inconsistent run configuration."""


class ValidationError(TseError):
    """A manifest, trial list, or other external record failed validation."""


class CheckpointError(TseError):
    """A checkpoint is missing required pieces or is internally inconsistent."""


class TrainingDivergedError(TseError):
    """Training hit a non-finite loss."""

    def __init__(self, message, epoch=None, batch_index=None):
        super().__init__(message)
        self.epoch = epoch
        self.batch_index = batch_index
