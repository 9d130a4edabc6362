"""Exception hierarchy shared by every module."""


class AnchorDiffError(Exception):
    """Base class for all package errors."""


class ConfigurationError(AnchorDiffError, ValueError):
    """Invalid configuration: indivisible dimensions, bad schedule range, odd widths."""


class ValidationError(AnchorDiffError, ValueError):
    """Input data with the wrong shape, range or index."""


class InsufficientFramesError(ValidationError):
    """A clip is too short for the requested sequence length."""


class PlanningError(AnchorDiffError, ValueError):
    """A frame count that no batch plan or window tiling can cover."""


class DivergenceError(AnchorDiffError, RuntimeError):
    """Training produced a non-finite loss."""
