"""Exception types shared across the package.

Everything raised on purpose derives from CondenseError so callers can
catch one base class at the CLI / service boundary.
"""


class CondenseError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(CondenseError):
    """Tensor operands have incompatible extents.

    Messages name the offending dimensions; raised before any partial
    computation happens.
    """


class ConfigError(CondenseError):
    """A model or training configuration violates an invariant."""


class DataError(CondenseError):
    """A dataset file is malformed, truncated, or missing."""


class ConversionError(CondenseError):
    """A model cannot be converted to its grouped inference form."""


class TrainingDiverged(CondenseError):
    """Loss became non-finite during optimization."""

    def __init__(self, epoch: int, step: int, loss: float):
        self.epoch = epoch
        self.step = step
        self.loss = loss
        super().__init__(
            f"non-finite loss {loss!r} at epoch {epoch}, step {step}"
        )
