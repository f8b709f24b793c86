"""Exception hierarchy shared across the package."""


class SlapError(Exception):
    """Base class for all package errors."""


class PlacementError(SlapError):
    """Objects could not be placed without overlap within the attempt budget."""


class EmptyCloud(SlapError):
    """An operation requiring points received an empty cloud."""


class EmptyCrop(SlapError):
    """A crop around a predicted interaction point contained no points."""


class TargetNotInP(SlapError):
    """The labeled interaction point does not snap to any token point."""


class DatasetError(SlapError):
    """Dataset is malformed (bad split, missing files, invariant violation)."""


class NonFiniteLoss(SlapError):
    """Training loss became NaN/inf; message carries the offending sample id."""


class ToleranceExceeded(SlapError):
    """A gradient check exceeded its tolerance; message carries the parameter path."""


class ConfigMismatch(SlapError):
    """Checkpoint config hash does not match the expected model config."""


class LockError(SlapError):
    """Another run owns the checkpoint directory."""
