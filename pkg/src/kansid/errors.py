"""Exception types shared across the toolkit.

Plain ``ValueError`` is used for bad call arguments; the classes here mark
domain outcomes that callers may want to catch and report rather than fix.
"""


class KansidError(Exception):
    """Base class for domain errors raised by this package."""


class DegenerateDataError(KansidError):
    """Data has no usable spread (e.g. a constant input column)."""


class NotSymbolicError(KansidError):
    """Network cannot be folded to a closed-form equation.

    ``edges`` lists the offending ``(layer, out_index, in_index, reason)``
    tuples.
    """

    def __init__(self, message, edges=()):
        super().__init__(message)
        self.edges = list(edges)


class TrainingDivergedError(KansidError):
    """Optimizer hit a non-finite loss or gradient.

    ``last_params`` carries the last finite parameter vector.
    """

    def __init__(self, message, last_params=None):
        super().__init__(message)
        self.last_params = last_params


class SimulationDivergedError(KansidError):
    """Integrator produced a non-finite state at ``time_seconds``."""

    def __init__(self, message, time_seconds=None):
        super().__init__(message)
        self.time_seconds = time_seconds


class ModelFormatError(KansidError):
    """Serialized model/equation/state-space document is malformed."""


class ConfigError(KansidError):
    """Bad key or value in a config file or ``--set`` override."""
