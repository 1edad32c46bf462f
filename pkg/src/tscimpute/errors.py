"""Exception types raised across the package."""


class TscError(Exception):
    """Base class for all package errors."""


class NetworkError(TscError, ValueError):
    """Invalid road network construction parameters."""


class SimulationError(TscError):
    """The simulator reached an inconsistent state (e.g. a broken route)."""


class ControlError(TscError, ValueError):
    """A signal plan referenced an unknown intersection or phase."""


class ConstraintError(TscError):
    """A sampling constraint could not be satisfied."""


class MaskError(TscError, ValueError):
    """An observation-restricted view was requested for the wrong intersection set."""


class ImputationUnavailable(TscError):
    """No observed neighbour was available to impute from."""


class InterfaceError(TscError, ValueError):
    """Input dimensions do not match a model's layout."""


class DivergenceError(TscError, FloatingPointError):
    """Training produced a non-finite loss or gradient."""

    def __init__(self, message: str, epoch: int | None = None):
        super().__init__(message)
        self.epoch = epoch


class BufferEmpty(TscError):
    """Replay sampling from an empty (or fully filtered) buffer."""


class ConfigError(TscError, ValueError):
    """Experiment configuration failed validation.

    ``problems`` lists every violated field, not just the first one.
    """

    def __init__(self, problems: list[str]):
        super().__init__("; ".join(problems))
        self.problems = list(problems)
