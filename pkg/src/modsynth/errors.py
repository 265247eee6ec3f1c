"""Exception types shared across the toolkit."""


class ModSynthError(Exception):
    """Base class for all toolkit errors."""


class ParameterError(ModSynthError, ValueError):
    """An argument violates a documented precondition."""


class FormatError(ModSynthError):
    """A file uses an encoding or layout outside the supported subset."""


class CorruptFileError(ModSynthError):
    """A file's payload disagrees with its own header."""


class CorruptModelError(CorruptFileError):
    """A model file is truncated or fails its version/magic check."""


class GridMismatchError(ModSynthError):
    """Two volumes expected on the same grid are not."""


class DimensionMismatchError(ModSynthError):
    """A feature vector's length does not match the consumer's expectation."""


class InsufficientLandmarksError(ModSynthError):
    """Fewer active landmarks than a fit requires."""


class DegenerateLandmarksError(ModSynthError):
    """Landmark geometry (coplanar/duplicate points) makes the fit singular."""


class InsufficientSamplesError(ModSynthError):
    """Masked voxel population is smaller than the requested sample count."""


class DegenerateBinsError(ModSynthError):
    """Too few distinct intensities to define decile bins."""


class DegenerateStatisticsError(ModSynthError):
    """A statistic (e.g. correlation) is undefined on the masked region."""


class EmptyMaskError(ModSynthError):
    """A mask selects no voxels."""


class InvalidInitError(ModSynthError):
    """A refinement stage was handed a failed initial result."""


class ConfigError(ModSynthError):
    """A pipeline configuration file is missing or inconsistent."""
