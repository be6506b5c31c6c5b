"""Exception types raised across the package."""


class DentArrangeError(Exception):
    """Base class for all errors raised by this package."""


class EmptyInput(DentArrangeError, ValueError):
    pass


class InvalidMotion(DentArrangeError, ValueError):
    pass


class InsufficientPoints(DentArrangeError, ValueError):
    pass


class MissingAnchor(DentArrangeError, KeyError):
    pass


class DegenerateQuaternion(DentArrangeError, ValueError):
    pass


class DegeneratePair(DentArrangeError, ValueError):
    """Two clouds share a barycenter, so no mid-plane exists."""


class NoOverlapSupport(DentArrangeError, ValueError):
    """No grid cell is covered by both clouds; enlarge the grid or move the clouds closer."""


class ShapeError(DentArrangeError, ValueError):
    pass


class DegenerateFeature(DentArrangeError, ValueError):
    pass


class CannotRearrange(DentArrangeError, ValueError):
    pass


class NonFiniteLoss(DentArrangeError, FloatingPointError):
    pass


class InfeasibleSpec(DentArrangeError, ValueError):
    pass


class RangeError(DentArrangeError, ValueError):
    pass


class ConfigError(DentArrangeError, ValueError):
    pass
