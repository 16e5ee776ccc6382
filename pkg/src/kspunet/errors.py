"""Exception types raised across the package."""


class KspunetError(Exception):
    """Base class for all package errors."""


class DegenerateConfiguration(KspunetError, ValueError):
    """Landmarks collapse to a single point after centering."""


class DimensionMismatch(KspunetError, ValueError):
    pass


class OutOfRange(KspunetError, ValueError):
    pass


class SamplerStall(KspunetError, RuntimeError):
    """Rejection sampler exceeded its iteration cap."""


class ShapeMismatch(KspunetError, ValueError):
    pass


class MissingGradient(KspunetError, RuntimeError):
    pass


class CheckpointError(KspunetError, ValueError):
    """Checkpoint file is malformed or has an unsupported version."""


class DatasetError(KspunetError, ValueError):
    """A dataset file is missing or fails validation."""


class InvalidConfig(KspunetError, ValueError):
    pass
