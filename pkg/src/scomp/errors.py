"""Exception types shared across the package."""


class ScompError(Exception):
    """Base class for errors raised by scomp."""


class ValidationError(ScompError, ValueError):
    """A value failed a construction-time invariant."""


class DimensionMismatchError(ValidationError):
    """Arrays that must share a shape do not."""


class MeshFormatError(ScompError):
    """A mesh file could not be parsed or violates format constraints."""


class DegenerateGeometryError(ScompError):
    """Geometry too flat, too small or too ill conditioned to proceed."""


class InsufficientCorrespondencesError(ScompError):
    """Fewer than the required number of usable correspondence pairs."""


class GridBoundsError(ScompError):
    """Geometry falls outside the voxel grid it must be rasterized into."""


class UndefinedMetricError(ScompError):
    """A metric has no defined value for the given inputs."""


class StageFailure(ScompError):
    """A pipeline stage backend failed or produced invalid outputs."""


class ConfigError(ScompError):
    """Pipeline configuration is missing, malformed or inconsistent."""
