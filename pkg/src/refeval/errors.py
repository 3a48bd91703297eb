"""Exception hierarchy. Each family maps to one CLI exit code."""


class RefevalError(Exception):
    exit_code = 1


class ConfigError(RefevalError):
    """Bad or inconsistent configuration (includes unconfigured model ids)."""

    exit_code = 2


class PreconditionError(RefevalError):
    """A stage was invoked before the artifacts it needs exist."""

    exit_code = 2


class LifecycleError(ValueError):
    """Illegal knowledge-unit status transition."""


class BackendError(RefevalError):
    exit_code = 3
    transient = False


class TransportError(BackendError):
    """Network failure or 5xx-class reply; eligible for retry."""

    transient = True


class BackendRefusal(BackendError):
    pass


class EmptyCompletion(BackendError):
    pass


class PlaybookMiss(BackendError):
    """The mock backend has no rule for a request and no default reply."""


class CorruptionError(RefevalError):
    exit_code = 4

    def __init__(self, path, detail):
        super().__init__(f"{path}: {detail}")
        self.path = path
