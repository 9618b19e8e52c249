"""Exception types shared across the package."""


class PromptSumError(Exception):
    """Base class for all promptsum errors."""


class ShapeError(PromptSumError):
    """Tensor operands have incompatible shapes for the requested op."""


class DomainError(PromptSumError):
    """Operation applied outside its mathematical domain (e.g. empty softmax axis)."""


class ContractError(PromptSumError):
    """A caller violated an API precondition."""


class ConfigError(PromptSumError):
    """Invalid configuration value or combination."""


class DataError(PromptSumError):
    """Corpus or dataset cannot be used (empty, too small, malformed)."""


class OracleError(PromptSumError):
    """A verification oracle could not run (e.g. non-deterministic objective)."""


class CheckpointError(PromptSumError):
    """Base class for checkpoint persistence failures."""


class CheckpointCorruptError(CheckpointError):
    """Checksum mismatch: the checkpoint bytes were altered."""


class CheckpointVersionError(CheckpointError):
    """Checkpoint was written with an unsupported format version."""


class DocumentSkipped(PromptSumError):
    """Non-fatal signal: this document cannot produce the requested artifact."""
