"""Exception hierarchy shared by every module."""


class ErmppError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(ErmppError, ValueError):
    pass


class LabelError(ErmppError, IndexError):
    pass


class ContractError(ErmppError):
    """A precondition of an operation was violated by the caller."""


class ArchitectureError(ErmppError):
    """Two model states (or a state and a model) do not share a key set."""


class ConfigError(ErmppError):
    """Invalid experiment configuration or schedule."""


class CheckpointError(ErmppError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointChecksumError(CheckpointError):
    pass


class CheckpointFormatError(CheckpointError):
    pass
