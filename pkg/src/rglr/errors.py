"""Exception types raised across the package."""


class RGLRError(Exception):
    """Base class for all package errors."""


class ParseError(RGLRError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class EmptyCloud(RGLRError):
    pass


class DegenerateCloud(RGLRError):
    pass


class TooFewPoints(RGLRError):
    pass


class SingularPrecision(RGLRError):
    pass


class TooFewBlueNeighbors(RGLRError):
    pass


class CollinearPoints(RGLRError):
    pass


class LanczosBreakdown(RGLRError):
    pass


class StepSizeError(RGLRError):
    """Fixed APG step exceeds 1/L."""


class NoFlatPatches(RGLRError):
    pass


class DegenerateModels(RGLRError):
    pass


class ZeroMatrix(RGLRError):
    pass
