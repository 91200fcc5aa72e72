"""Exception types raised across the package.

Every error derives from :class:`DinoNestedUNetError` and from the closest
builtin, so callers can catch either.
"""


class DinoNestedUNetError(Exception):
    """Base class for all package errors."""


class ParseError(DinoNestedUNetError, ValueError):
    pass


class ValidationError(DinoNestedUNetError, ValueError):
    pass


class ShapeError(DinoNestedUNetError, ValueError):
    pass


class WeightsNotFound(DinoNestedUNetError, FileNotFoundError):
    pass


class WeightsShapeMismatch(DinoNestedUNetError, ValueError):
    pass


class VariantMismatch(DinoNestedUNetError, ValueError):
    pass


class EmptyInput(DinoNestedUNetError, ValueError):
    pass


class TooFewSlides(DinoNestedUNetError, ValueError):
    pass


class BadMaskValues(DinoNestedUNetError, ValueError):
    pass


class EmptySplit(DinoNestedUNetError, ValueError):
    pass


class ConfigMismatch(DinoNestedUNetError, ValueError):
    pass


class RangeError(DinoNestedUNetError, ValueError):
    pass


class CheckpointError(DinoNestedUNetError, ValueError):
    """Checkpoint file is not a recognised container."""


class DivergedLoss(DinoNestedUNetError, RuntimeError):
    pass
