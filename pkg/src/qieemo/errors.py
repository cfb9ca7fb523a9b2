"""Exception types shared across the package."""


class QieemoError(Exception):
    """Base class for all package errors."""


class DimensionError(QieemoError, ValueError):
    """Tensor shapes incompatible with an operation."""


class LabelError(QieemoError, ValueError):
    """Class label outside the valid range."""


class ContractError(QieemoError, RuntimeError):
    """An internal API contract was violated (non-scalar loss, state drift)."""


class ConfigError(QieemoError, ValueError):
    """Invalid model or training configuration."""


class InputError(QieemoError, ValueError):
    """Invalid runtime input (too-short utterance, bad fold index, ...)."""


class DataError(QieemoError, ValueError):
    """Corpus-level problem (missing labels, mismatched manifest, ...)."""


class FormatError(DataError):
    """Malformed binary file; message carries the byte offset."""


class CheckpointError(QieemoError, ValueError):
    """Checkpoint missing required parameters or metadata."""
