"""Exception and warning types shared across the package."""


class AuvMppiError(Exception):
    pass


class ConfigError(AuvMppiError, ValueError):
    """Invalid configuration value or file."""


class AngleNearPi(AuvMppiError, ValueError):
    pass


class SingularMass(AuvMppiError):
    pass


class DimensionMismatch(AuvMppiError, ValueError):
    pass


class NonFiniteState(AuvMppiError, FloatingPointError):
    pass


class AllSamplesRejected(AuvMppiError):
    pass


class PlantDiverged(AuvMppiError):
    """Plant state became non-finite. The partial log is kept on ``.log``."""

    def __init__(self, message, log=None):
        super().__init__(message)
        self.log = log


class EmptyLog(AuvMppiError, ValueError):
    pass


class MissingData(AuvMppiError, FileNotFoundError):
    pass


class ClampedInput(UserWarning):
    """A thruster command exceeded max_thrust and was saturated."""
