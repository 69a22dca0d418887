"""Exception types raised across the package."""


class SparcError(Exception):
    """Base class for all package errors."""


class FormatError(SparcError):
    """Weights container or trace file is malformed."""


class ShapeError(SparcError, ValueError):
    """Array shapes or lengths are inconsistent."""


class EmptyContextError(SparcError, ValueError):
    """Attention was requested over zero positions."""


class CapacityError(SparcError):
    """The sequence would exceed ``max_seq_len``."""


class StateError(SparcError):
    """An operation was applied to state that is not ready for it."""


class DegenerateDistributionError(SparcError, ValueError):
    """A distribution with zero total mass cannot be normalized."""


class RangeError(SparcError, ValueError):
    """An argument is outside the range an operation supports."""
