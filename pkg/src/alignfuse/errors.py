"""Exception hierarchy shared across the package."""


class AlignFuseError(Exception):
    """Base class for all package errors."""


class DimensionError(AlignFuseError):
    """Shapes of operands are incompatible."""


class NumericError(AlignFuseError):
    """A computation produced NaN/Inf or received non-finite input."""


class ContractError(AlignFuseError):
    """An operation was called outside its contract (e.g. non-scalar loss)."""


class DegenerateInputError(AlignFuseError):
    """Input is degenerate for the requested operation (e.g. zero-norm vector)."""


class VocabError(AlignFuseError):
    """Token id out of range for the vocabulary."""


class LabelError(AlignFuseError):
    """Class label outside the configured range."""


class ConfigError(AlignFuseError):
    """Invalid or missing configuration."""


class DataFormatError(AlignFuseError):
    """On-disk dataset or manifest is malformed."""


class CheckpointError(AlignFuseError):
    """Base class for checkpoint load failures."""


class MagicMismatchError(CheckpointError):
    """File does not start with the expected magic bytes."""


class VersionMismatchError(CheckpointError):
    """File version is not supported."""


class TruncatedFileError(CheckpointError):
    """File ended before the encoded payload was complete."""
