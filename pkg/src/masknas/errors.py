"""Exception hierarchy shared across the package.

Every error raised on purpose by this package derives from MaskNASError so
callers (the CLI in particular) can map failures onto exit codes without
pattern-matching on messages.
"""


class MaskNASError(Exception):
    """Base class for all package errors."""


class DimensionError(MaskNASError):
    """Array shapes are incompatible for the requested operation."""


class RankError(MaskNASError):
    """An array has the wrong number of dimensions."""


class RangeError(MaskNASError):
    """A scalar argument is outside its legal range."""


class NumericError(MaskNASError):
    """A numeric invariant was violated (NaN, non-finite, bad dtype)."""


class ProvenanceError(MaskNASError):
    """Data or tensors were used in a phase they do not belong to."""


class ConfigError(MaskNASError):
    """A configuration file or value is invalid."""


class FormatError(MaskNASError):
    """A serialized artifact does not match its declared format."""


class IntegrityError(FormatError):
    """A serialized artifact is structurally valid but corrupted."""


class PrerequisiteError(MaskNASError):
    """A required input artifact is missing or unusable."""


class DivergenceError(MaskNASError):
    """Training produced non-finite losses and was aborted."""

    def __init__(self, message, last_checkpoint=None):
        super().__init__(message)
        self.last_checkpoint = last_checkpoint
