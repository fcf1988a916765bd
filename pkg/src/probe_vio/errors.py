"""Exception hierarchy shared across the package."""


class ProbeError(Exception):
    """Base class for all errors raised by probe_vio."""


class DomainError(ProbeError, ValueError):
    """Input outside the domain of a geometric operation (e.g. z <= 0)."""


class DegenerateDisparityError(DomainError):
    """Stereo disparity too small to triangulate."""


class DegenerateGeometryError(ProbeError):
    """The linearized alignment problem is rank deficient."""


class UnobservableMotionError(DegenerateGeometryError):
    """Too few usable correspondences to observe the 6-DOF motion."""


class ConfigurationError(ProbeError, ValueError):
    """Inconsistent run configuration (e.g. probe mode without a model)."""


class DatasetError(ProbeError):
    """Missing or malformed dataset files."""


class ModelFormatError(ProbeError):
    """Model file is corrupt, truncated, or of an unsupported version."""


class TrainingError(ProbeError):
    """Training could not produce a usable model."""
