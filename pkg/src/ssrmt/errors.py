"""Exception hierarchy shared across the package."""


class SSRError(Exception):
    """Base class for all errors raised by ssrmt."""


class InvalidInput(SSRError, ValueError):
    pass


class FormatError(SSRError, ValueError):
    """An answer was requested from a response that failed the format gate."""


class ProtocolMismatch(SSRError, ValueError):
    """A prompt handed to the toy backend was not rendered from a known template."""


class InvalidCompletion(SSRError, ValueError):
    """A completion cannot be produced by the backend's decision structure."""


class UnsupportedBackend(SSRError):
    pass


class ConfigError(SSRError, ValueError):
    pass


class BackendError(SSRError):
    """A remote backend failed after exhausting its retries."""

    def __init__(self, message, *, attempts=0, last_status=None, retryable=True):
        super().__init__(message)
        self.attempts = attempts
        self.last_status = last_status
        self.retryable = retryable


class ScorerUnavailable(SSRError):
    def __init__(self, message, *, attempts=0):
        super().__init__(message)
        self.attempts = attempts
