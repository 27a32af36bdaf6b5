"""Exception hierarchy shared by the model, solver and inference layers."""


class ValidationError(ValueError):
    """Bad input: malformed file, inconsistent config, out-of-bounds theta."""


class InvalidSimulation(RuntimeError):
    """The forward model could not produce a waveform for these parameters.

    Callers computing an objective map this to the RSS sentinel.
    """


class InvalidParameter(InvalidSimulation):
    """Scaled Windkessel resistance or compliance is not positive."""


class NumericalDivergence(InvalidSimulation):
    """The PDE solve broke down (CFL violation, non-positive area, NaN, Newton failure)."""

    def __init__(self, message, vessel=None, step=None):
        super().__init__(message)
        self.vessel = vessel
        self.step = step


class DegenerateChain(ValidationError):
    """A chain statistic is undefined (constant chain, singular covariance)."""
