"""Exception hierarchy shared by every distfield module."""


class DistfieldError(Exception):
    """Base class for all library errors."""


class DegenerateConfiguration(DistfieldError):
    pass


class DimensionMismatch(DistfieldError):
    pass


class SingularSystem(DistfieldError):
    pass


class EmptyMask(DistfieldError):
    pass


class EmptyOverlap(DistfieldError):
    pass


class NonSquareInput(DistfieldError):
    pass


class ShapeMismatch(DistfieldError):
    pass


class NonFiniteActivation(DistfieldError):
    pass


class NonFiniteGradient(DistfieldError):
    pass


class DivergenceDetected(DistfieldError):
    pass


class GridTooSmall(DistfieldError):
    pass


class GridMismatch(DistfieldError):
    pass


class InsufficientSamples(DistfieldError):
    pass


class TooManyCoefficients(DistfieldError):
    pass


class BadEdges(DistfieldError):
    pass


class ModelConfigMismatch(DistfieldError):
    pass


class FormatError(DistfieldError):
    """A file did not match the expected binary or text layout."""
