"""Exception hierarchy shared by every module."""


class SpatialTTSError(Exception):
    pass


class ValidationError(SpatialTTSError, ValueError):
    """A value violates a type invariant or an operation precondition."""


class BackendError(SpatialTTSError):
    """Base for anything that goes wrong talking to a model backend."""

    retryable = False


class TransportError(BackendError):
    retryable = True


class BackendTimeout(TransportError):
    pass


class ProtocolError(BackendError):
    """The backend answered, but not in the agreed wire format."""


class GenerationError(BackendError):
    """The backend refused to generate; carries its message."""


class CapabilityError(BackendError):
    pass


class ResolutionError(BackendError):
    """An image reference could not be resolved from the store."""


class ReplayMiss(BackendError):
    """Replay mode received a request that is not in the transcript."""


class AlignmentError(SpatialTTSError):
    pass


class ConfigError(SpatialTTSError):
    pass
