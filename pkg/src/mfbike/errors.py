"""Exception hierarchy for mfbike."""


class MFBikeError(Exception):
    """Base class for all mfbike errors."""


class InvalidSegmentationError(MFBikeError, ValueError):
    pass


class NoUniqueStationaryVectorError(MFBikeError, ValueError):
    pass


class InvalidParameterError(MFBikeError, ValueError):
    pass


class RateDomainError(MFBikeError, ValueError):
    """A rate was requested at a level where no such transition exists."""


class RetrySeriesDivergenceError(MFBikeError, ArithmeticError):
    """The retry series x + 2x^2 + ... was evaluated at x >= 1."""

    def __init__(self, msg, level=None, env_state=None):
        super().__init__(msg)
        self.level = level
        self.env_state = env_state


class FactorizationError(MFBikeError, ArithmeticError):
    def __init__(self, msg, level=None, iterate=None):
        super().__init__(msg)
        self.level = level
        self.iterate = iterate


class DegenerateBoundaryError(MFBikeError, ArithmeticError):
    pass


class IntegrationAbortError(MFBikeError, RuntimeError):
    def __init__(self, msg, time=None):
        super().__init__(msg)
        self.time = time


class SteadyStateNotReachedError(MFBikeError, RuntimeError):
    def __init__(self, msg, derivative_norm=None, state=None):
        super().__init__(msg)
        self.derivative_norm = derivative_norm
        self.state = state


class ConservationError(MFBikeError, AssertionError):
    """Bike count changed during a physical-mode simulation."""

    def __init__(self, msg, event=None):
        super().__init__(msg)
        self.event = event


class NotConvergedError(MFBikeError, RuntimeError):
    def __init__(self, msg, residual=None):
        super().__init__(msg)
        self.residual = residual


class ConfigError(MFBikeError, ValueError):
    pass
