"""Exception hierarchy shared across the package."""


class LipSynthError(Exception):
    """Base class for all package errors."""


class ConfigError(LipSynthError):
    """Invalid configuration value or schema violation."""


class ArgumentError(LipSynthError, ValueError):
    """Invalid argument to an operation."""


class VocabularyError(ArgumentError):
    """Phoneme symbol not present in the inventory."""


class LengthOverflowError(ArgumentError):
    """Sequence longer than the fixed padded length."""


class EmptySequenceError(ArgumentError):
    """Operation requires at least one valid element."""


class DegenerateEmbeddingError(ArgumentError):
    """Zero-norm embedding where a direction is required."""


class CorpusIOError(LipSynthError):
    """Base class for on-disk corpus problems."""


class MissingManifestError(CorpusIOError):
    """Corpus directory has no manifest."""


class SchemaVersionError(CorpusIOError):
    """On-disk schema version not supported."""


class IntegrityError(CorpusIOError):
    """Checksum or clip-count mismatch against the manifest."""


class CheckpointError(LipSynthError):
    """Base class for checkpoint container problems."""


class CheckpointVersionError(CheckpointError):
    """Checkpoint container version not supported."""


class CheckpointIntegrityError(CheckpointError):
    """Truncated or corrupted checkpoint container."""
