"""Exception types shared across the package."""


class TpcError(Exception):
    """Base class for all package-specific errors."""


class DimensionError(TpcError):
    """Array shapes violate an operation's contract."""


class DomainError(TpcError):
    """A numeric value is outside an operation's mathematical domain."""


class DegenerateMaskError(TpcError):
    """A masked reduction was asked to average over zero selected cells."""


class GraphError(TpcError):
    """Misuse of the recording/backward machinery."""


class NormStateError(TpcError):
    """Batch-norm running statistics used before any update."""


class ConfigError(TpcError):
    """A configuration value violates a documented constraint."""


class DatasetError(TpcError):
    """A dataset directory or record violates the data contract."""


class CheckpointError(TpcError):
    """A checkpoint file is malformed or inconsistent with its inputs."""


class TrainingError(TpcError):
    """Optimization failure: non-finite gradients or diverging loss."""
