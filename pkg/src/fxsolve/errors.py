"""Exception types raised across the package."""


class FxError(Exception):
    """Base class for every error raised by fxsolve."""


class AllZeroInput(FxError, ValueError):
    """No nonzero element to derive an exponent from; callers fall back to 0."""


class DegenerateDistribution(FxError, ValueError):
    """|mean| + 3*std is zero, so a distribution exponent is undefined."""


class ZeroNorm(FxError, ValueError):
    pass


class ShapeMismatch(FxError, ValueError):
    pass


class NoConvergence(FxError, RuntimeError):
    pass


class SingularMatrix(FxError, ValueError):
    pass


class ConfigInvalid(FxError, ValueError):
    pass


class InsufficientData(FxError, ValueError):
    pass


class ThetaNotContractive(FxError, ValueError):
    pass


class AccumulatorOverflow(FxError, OverflowError):
    pass


class SingularKernel(FxError, ValueError):
    pass


class UnsupportedFormat(FxError, ValueError):
    pass


class OutOfRange(FxError, ValueError):
    pass


class DivergenceDetected(FxError, RuntimeError):
    """The iterate grew past the divergence guard. ``trace`` holds the partial record."""

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace


class InnerDiverged(FxError, RuntimeError):
    """An inner Richardson loop of the residual solver diverged at outer loop ``loop``."""

    def __init__(self, loop, traces=None):
        super().__init__(f"inner Richardson loop diverged at outer loop {loop}")
        self.loop = loop
        self.traces = traces or []


class DegenerateGeometry(UserWarning):
    """Issued when a beam misses the grid and its (all-zero) row is dropped."""
