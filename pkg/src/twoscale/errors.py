"""Exception types shared across the package."""


class TwoScaleError(Exception):
    """Base class for all package errors."""


class InvalidParameterError(TwoScaleError, ValueError):
    pass


class InvalidInputError(TwoScaleError, ValueError):
    pass


class DimensionError(TwoScaleError, ValueError):
    pass


class ResolutionError(TwoScaleError, ValueError):
    """A plane-wave window is too small to hold the modes it must represent."""


class NumericalError(TwoScaleError, RuntimeError):
    pass


class NoDiracPointError(NumericalError):
    pass


class SymmetryViolationError(NumericalError):
    pass


class DegenerateConeError(NumericalError):
    pass


class SpectralGapError(NumericalError):
    pass


class DependentFamilyError(NumericalError):
    pass


class ReductionUndefinedError(NumericalError):
    pass


class ResourceError(TwoScaleError, MemoryError):
    pass


class MatchFailure(NumericalError):
    pass


class ConfigError(TwoScaleError, ValueError):
    pass
