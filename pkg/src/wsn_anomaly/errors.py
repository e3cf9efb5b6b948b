"""Exception hierarchy shared by every module.

Each class maps to a distinct CLI exit code (see ``wsn_anomaly.cli``).
"""


class WSNError(Exception):
    """Base class for all library errors."""

    exit_code = 1


class DimensionError(WSNError, ValueError):
    """Operand shapes are incompatible."""

    exit_code = 5


class ConfigError(WSNError, ValueError):
    """A configuration value is out of range or inconsistent."""

    exit_code = 2


class FormatError(WSNError, ValueError):
    """Input data could not be parsed or contains no usable rows."""

    exit_code = 4


class ContractError(WSNError, RuntimeError):
    """An operation was called outside of its documented preconditions."""

    exit_code = 5


class TrainingError(WSNError, RuntimeError):
    """Training diverged (NaN loss or gradient)."""

    exit_code = 6


class UndefinedMetricError(WSNError, ValueError):
    """A metric is mathematically undefined for the given labels."""

    exit_code = 7
