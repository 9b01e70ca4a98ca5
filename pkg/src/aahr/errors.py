"""Exception types shared across the package."""


class AahrError(Exception):
    """Base class for all package errors."""


class FormatError(AahrError):
    """A tensor file or manifest does not conform to the documented layout."""


class DatasetError(AahrError):
    """A manifest references data that is missing or inconsistent."""


class ShapeError(AahrError):
    """Operands have incompatible shapes."""


class NumericError(AahrError):
    """Non-finite or degenerate values where finite ones are required."""


class CapacityError(AahrError):
    """A ring-buffer push exceeds the buffer capacity."""


class ProtocolError(AahrError):
    """Evaluation ground truth is empty or malformed."""


class ConfigError(AahrError):
    """A configuration file or value is invalid."""


class TrainingError(AahrError):
    """Training produced a non-finite loss."""
