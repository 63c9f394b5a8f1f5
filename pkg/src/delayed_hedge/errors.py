"""Exception and warning types shared across the package."""


class DelayedHedgeError(Exception):
    pass


class PayoffError(DelayedHedgeError, ValueError):
    pass


class NonMonotoneBreakpoints(PayoffError):
    pass


class NegativeValue(PayoffError):
    pass


class DiscontinuousTail(PayoffError):
    pass


class DegenerateVariance(DelayedHedgeError, ValueError):
    pass


class InfiniteEnvelope(DelayedHedgeError):
    pass


class BracketingFailure(DelayedHedgeError, RuntimeError):
    pass


class OverflowGuard(DelayedHedgeError, FloatingPointError):
    """Raised when an exponent would exceed the float64 safe range.

    ``node`` carries the offending (price, position) pair when known.
    """

    def __init__(self, message, node=None):
        super().__init__(message)
        self.node = node


class ResolutionTooCoarse(DelayedHedgeError, ValueError):
    pass


class GridMismatch(DelayedHedgeError, ValueError):
    pass


class PolicyError(DelayedHedgeError, ValueError):
    pass


class ConfigParseError(DelayedHedgeError, ValueError):
    pass


class ToleranceFailure(DelayedHedgeError):
    pass


class ExtrapolationWarning(UserWarning):
    pass
