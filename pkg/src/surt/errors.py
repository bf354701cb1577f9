"""Domain exceptions shared across the package."""


class SurtError(Exception):
    """Base class for all domain errors raised by this package."""


class OutOfSchedule(SurtError):
    pass


class NonFiniteGradient(SurtError):
    pass


class GradientMissing(SurtError):
    pass


class NonFiniteObjective(SurtError):
    pass


class NonFiniteLoss(SurtError):
    pass


class BadLabel(SurtError):
    pass


class ShapeMismatch(SurtError):
    pass


class OracleTooLarge(SurtError):
    pass


class BadBeam(SurtError):
    pass


class BadHop(SurtError):
    pass


class BadPattern(SurtError):
    pass


class TooManySimultaneous(SurtError):
    pass


class InfeasibleOverlap(SurtError):
    pass


class TooManyUtterances(SurtError):
    pass


class BadMatrix(SurtError):
    pass
