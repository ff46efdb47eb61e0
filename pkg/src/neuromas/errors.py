class NeuroMASError(Exception):
    """Base class for all errors raised by this package."""


class TopologyError(NeuroMASError, ValueError):
    pass


class GrowthError(TopologyError):
    """Raised for expansions that are not monotone (contraction, fewer layers)."""


class MessagingError(NeuroMASError, ValueError):
    pass


class PolicyError(NeuroMASError, ValueError):
    pass


class EnumerationGuardError(PolicyError):
    """Raised when an exhaustive enumeration would exceed its size guard."""


class TraceError(NeuroMASError, ValueError):
    pass


class TaskError(NeuroMASError, ValueError):
    pass


class TrainingError(NeuroMASError, ValueError):
    pass


class SweepError(NeuroMASError, ValueError):
    pass


class TransportError(NeuroMASError):
    """HTTP or auth failure after retries were exhausted."""


class RemoteTimeoutError(TransportError):
    pass


class ProtocolError(TransportError):
    """The endpoint answered, but the body was not a chat completion."""
