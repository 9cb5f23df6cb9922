"""Exception hierarchy shared by all surfage modules."""


class SurfageError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(SurfageError):
    """Tensor or kernel shapes are incompatible for an operation."""


class ConfigurationError(SurfageError):
    """A layer or run configuration value is out of its legal range."""


class EmptySetError(SurfageError):
    """An aggregation was asked to reduce over zero elements."""


class GradientError(SurfageError):
    """backward() was called on a tensor that is not a scalar loss."""


class MeshParseError(SurfageError):
    """A mesh file could not be parsed."""


class MeshValidationError(SurfageError):
    """Parsed mesh violates a structural invariant (bad index, degenerate face)."""


class NonManifoldMeshError(MeshValidationError):
    """An edge is shared by more than two faces."""


class ChannelMismatchError(MeshValidationError):
    """A per-vertex channel does not have one value per vertex."""


class UnknownChannelError(SurfageError):
    """A requested per-vertex channel name is not present on the mesh."""


class DecimationError(SurfageError):
    """Edge-collapse simplification cannot proceed (bad target or no legal collapse)."""


class VoxelizationError(SurfageError):
    """Mesh cannot be voxelized (open surface or bad grid dimensions)."""


class SplitError(SurfageError):
    """Cohort cannot be split as requested."""


class CheckpointError(SurfageError):
    """Checkpoint file is unreadable."""


class CheckpointMagicError(CheckpointError):
    """File does not start with the expected magic bytes."""


class CheckpointVersionError(CheckpointError):
    """Checkpoint format version is not supported."""


class CheckpointTruncatedError(CheckpointError):
    """Checkpoint file ended before all declared tensors were read."""


class ArchitectureMismatchError(SurfageError):
    """Checkpoint architecture does not match the requested one."""


class TrainingDivergedError(SurfageError):
    """Training produced a non-finite loss."""
