"""Exception hierarchy shared across the package."""


class StatefulRAGError(Exception):
    """Base class for all package errors."""


class InvalidInputError(StatefulRAGError, ValueError):
    pass


class BuildError(StatefulRAGError):
    def __init__(self, message: str, node_id: str | None = None):
        super().__init__(message if node_id is None else f"{message} (node {node_id})")
        self.node_id = node_id


class IndexFormatError(StatefulRAGError):
    """Index file is truncated, corrupt or otherwise unreadable."""


class IndexVersionError(IndexFormatError):
    pass


class RenderError(StatefulRAGError):
    pass


class PermissionDenied(StatefulRAGError):
    """Raised only by a memory pool running in strict mode."""


class GoldLeakError(StatefulRAGError):
    """Attempt to place gold-answer material into global memory."""


class ConfigError(StatefulRAGError):
    pass


class BackendError(StatefulRAGError):
    def __init__(self, message: str, attempts: int = 1, retryable: bool = False):
        super().__init__(message)
        self.attempts = attempts
        self.retryable = retryable


class BackendTimeout(BackendError):
    pass


class BackendHTTPError(BackendError):
    def __init__(self, message: str, status_code: int, attempts: int = 1, retryable: bool = False):
        super().__init__(message, attempts=attempts, retryable=retryable)
        self.status_code = status_code


class MalformedReplyError(BackendError):
    pass
