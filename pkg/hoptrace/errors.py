class HoptraceError(Exception):
    pass


class TraceStructureError(HoptraceError, ValueError):
    def __init__(self, message: str, step_index: int | None = None):
        super().__init__(message if step_index is None else f"step {step_index}: {message}")
        self.step_index: int | None = step_index


class SearchError(HoptraceError):
    def __init__(self, message: str, rollout: int | None = None, node_id: str | None = None):
        context = []
        if rollout is not None:
            context.append(f"rollout {rollout}")
        if node_id is not None:
            context.append(f"node {node_id}")
        prefix = f"[{', '.join(context)}] " if context else ""
        super().__init__(f"{prefix}{message}")
        self.message: str = message
        self.rollout: int | None = rollout
        self.node_id: str | None = node_id


class BackendError(HoptraceError):
    def __init__(self, message: str, context: str | None = None, attempts: int | None = None):
        super().__init__(message if context is None else f"{context}: {message}")
        self.context: str | None = context
        self.attempts: int | None = attempts


class TransientBackendError(BackendError):
    """A failure worth retrying (timeouts, dropped connections, rate limits, 5xx)."""


class EmptyGenerationError(BackendError):
    pass


class JudgeParseError(HoptraceError, ValueError):
    pass


class DatasetFormatError(HoptraceError, ValueError):
    def __init__(self, message: str, line: int | None = None, path: str | None = None):
        where = ""
        if path is not None:
            where = path
        if line is not None:
            where = f"{where}:{line}" if where else f"line {line}"
        super().__init__(f"{where}: {message}" if where else message)
        self.line: int | None = line
        self.path: str | None = path


class IntegrityError(HoptraceError):
    pass


class ConfigError(HoptraceError):
    pass
