"""Exception hierarchy shared by the solver, hypergradient and trainer."""


class AuxiNashError(Exception):
    """Base class for all package errors."""


class ConfigError(AuxiNashError, ValueError):
    """Invalid configuration or malformed input."""


class NumericalError(AuxiNashError):
    """A numerical routine failed (divergence, singular system, ...)."""


class ParetoStationaryError(NumericalError):
    """All task gradients vanish, so there is no bargaining direction.

    This is the halting signal of the training loop rather than a bug.
    """


class SolverDivergedError(NumericalError):
    pass


class NotConvergedError(NumericalError):
    pass


class IhvpDivergedError(NumericalError):
    pass
