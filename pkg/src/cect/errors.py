"""Exception hierarchy shared by every module.

The CLI maps these onto exit codes: validation-type errors exit 1, numeric
and runtime errors exit 2, ingestion and other IO errors exit 3.
"""


class CectError(Exception):
    """Base class for all package errors."""


class DimensionError(CectError, ValueError):
    """Tensor extents are incompatible with an operation."""


class ParameterError(CectError, ValueError):
    """A scalar argument is out of its allowed range."""


class ContractError(CectError, ValueError):
    """A caller broke an operation's precondition."""


class ConfigError(CectError, ValueError):
    """A configuration value is malformed or inconsistent."""


class ValidationError(CectError, ValueError):
    """A domain object violates one of its invariants."""


class SplitError(ValidationError):
    """A dataset cannot be partitioned as requested."""


class NonFiniteError(CectError, ArithmeticError):
    """NaN or Inf appeared where only finite values are allowed."""


class IngestionError(CectError, OSError):
    """A dataset file or image could not be read or understood."""


class CheckpointError(CectError, OSError):
    """A checkpoint file is malformed."""
