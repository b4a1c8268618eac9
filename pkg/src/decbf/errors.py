"""Exception types raised across the package."""


class DecbfError(Exception):
    """Base class for all package errors."""


class ModelError(DecbfError, ValueError):
    """State or control has the wrong shape for the dynamics kind."""


class SingularityError(ModelError):
    """Drone tilt angle reached the tan() singularity at +-pi/2."""


class NumericError(DecbfError, ArithmeticError):
    """A computation produced a non-finite value."""


class ConfigError(DecbfError, ValueError):
    """A scenario, training or run configuration is invalid."""


class PlacementError(ConfigError):
    """Rejection sampling could not place agents or goals."""


class CheckpointError(DecbfError):
    """A checkpoint file is malformed or incompatible."""


class UndefinedValueError(DecbfError, ValueError):
    """y-value requested on a trajectory with no labelled samples."""


class TrainingDiverged(DecbfError):
    """Training loss exceeded the divergence threshold."""
