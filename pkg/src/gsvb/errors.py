import numpy as np


class GsvbError(Exception):
    """Base class for all package errors."""


class DesignError(GsvbError, ValueError):
    def __init__(self, message: str, index: int | None = None):
        super().__init__(message)
        self.index = index


class OverlappingGroups(DesignError):
    pass


class NonContiguousGroups(DesignError):
    pass


class CoverageGap(DesignError):
    pass


class BadResponseDomain(DesignError):
    pass


class MgfOverflow(GsvbError, FloatingPointError):
    """A Poisson moment generating function exponent exceeded the cap."""


class PoissonRateOverflow(GsvbError, FloatingPointError):
    pass


class LineSearchFailure(GsvbError, RuntimeError):
    pass


class NonPdBlock(GsvbError, np.linalg.LinAlgError):
    pass


class InitFailure(GsvbError, RuntimeError):
    pass


class WishartDegenerate(GsvbError, RuntimeError):
    pass


class AucUndefined(GsvbError, ValueError):
    pass


class BadLevel(GsvbError, ValueError):
    pass
