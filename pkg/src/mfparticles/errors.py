class MfParticlesError(Exception):
    pass


class EvaluationError(MfParticlesError):
    """A model callable returned non-finite values."""


class InvertibilityError(MfParticlesError):
    """sigma sigma^T is numerically singular at some probe point."""

    def __init__(self, message, points=()):
        super().__init__(message)
        self.points = list(points)


class BlowUpError(MfParticlesError):
    def __init__(self, message, step=None, particle=None):
        super().__init__(message)
        self.step = step
        self.particle = particle


class HorizonTooLongError(MfParticlesError):
    def __init__(self, message, time=None):
        super().__init__(message)
        self.time = time


class BasisDegeneracyError(MfParticlesError):
    def __init__(self, message, step=None, condition=None):
        super().__init__(message)
        self.step = step
        self.condition = condition


class UnsupportedModelError(MfParticlesError):
    pass


class NoFitError(MfParticlesError):
    pass
