"""Exception types raised across the package."""


class LidarIntensityError(Exception):
    """Base class for all package errors."""


class FileFormatError(LidarIntensityError, ValueError):
    """Malformed input file."""


class ScanFormatError(FileFormatError):
    """Malformed binary scan, label, or ontology file."""


class LabelCountError(LidarIntensityError, ValueError):
    def __init__(self, n_labels, n_points):
        self.n_labels = n_labels
        self.n_points = n_points
        super().__init__(
            f"label count {n_labels} does not match point count {n_points}"
        )


class ContractError(LidarIntensityError, ValueError):
    """A documented precondition was violated by the caller."""


class GateError(LidarIntensityError, ValueError):
    """Range outside the calibration gate."""


class GrazingAngleError(LidarIntensityError, ValueError):
    """Incidence angle above the configured maximum."""


class SensorMismatchError(LidarIntensityError, ValueError):
    """Operation not legal for the scan's sensor tag."""


class InsufficientDataError(LidarIntensityError, ValueError):
    """Not enough points to build a statistic."""


class ModelCorruptError(LidarIntensityError, ValueError):
    """Model parameters are non-finite or malformed."""


class TrainingDivergedError(LidarIntensityError, RuntimeError):
    def __init__(self, epoch):
        self.epoch = epoch
        super().__init__(f"training diverged (non-finite loss) at epoch {epoch}")


class FitRejectedError(LidarIntensityError, ValueError):
    """Fitted transfer curve is not positive over its domain."""


class DomainError(LidarIntensityError, ValueError):
    """Evaluation outside a fitted curve's domain."""


class SceneSpecError(LidarIntensityError, ValueError):
    """Malformed synthetic scene description."""
