"""Exception hierarchy shared across the package.

Each class maps to one CLI exit-code family (see ``ltcfnet.cli``).
"""


class LtcfError(Exception):
    """Base class for all package errors."""


class ShapeError(LtcfError, ValueError):
    """Operand shapes are incompatible."""


class UsageError(LtcfError, RuntimeError):
    """An API was called in a state it does not support."""


class ConfigError(LtcfError, ValueError):
    """Invalid or mismatched configuration."""


class ResourceError(LtcfError, RuntimeError):
    """A size limit (e.g. attention tokens) was exceeded."""


class NumericError(LtcfError, FloatingPointError):
    """A non-finite value appeared during training."""


class IngestionError(LtcfError):
    """Dataset loading failed; ``problems`` lists per-file messages."""

    def __init__(self, message, problems=()):
        self.problems = list(problems)
        if self.problems:
            message = message + "\n  " + "\n  ".join(self.problems)
        super().__init__(message)


class CheckpointError(LtcfError):
    """Base class for checkpoint read failures."""


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass


class CheckpointCorruptError(CheckpointError):
    pass
