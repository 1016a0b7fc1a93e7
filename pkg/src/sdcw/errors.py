"""Exception hierarchy shared by every module."""


class WorkbenchError(Exception):
    """Base class for all workbench errors."""


class ShapeError(WorkbenchError):
    """Tensor dimensions are incompatible for the requested operation."""


class ParameterError(WorkbenchError):
    """A hyperparameter or configuration value is out of its valid range."""


class DataError(WorkbenchError):
    """Input data is malformed (bad tags, out-of-range ids, empty datasets)."""


class NumericsError(WorkbenchError):
    """A numeric operation produced NaN/Inf or received a non-finite input."""


class ConfigError(WorkbenchError):
    """An experiment config file is invalid (unknown key, bad value)."""


class PersistError(WorkbenchError):
    """A model file could not be written or read."""
